//! Clip-level statistics: sparsity, spectra, trajectory geometry, gate-map
//! spatial structure, and rank metrics.
//!
//! Everything here is pure f64 over plain slices, independent of the tape,
//! so each metric doubles as an oracle for the differentiable pipeline.

pub mod hull;
pub mod pca;

pub use hull::convex_hull_volume;
pub use pca::pca3_project;

use crate::error::{Result, SgError};
use crate::events::MOTION_EPS;
use crate::Tensor;

/// Decay constant of the raw anomaly trace.
pub const DEFAULT_TAU_ANOM: f64 = 4.0;

/// Hoyer sparsity: (sqrt(N) - l1/l2) / (sqrt(N) - 1), in [0, 1].
/// All-zero input is defined as 0 (nothing is concentrated).
pub fn hoyer(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(SgError::invalid("hoyer", format!("need at least 2 values, got {}", n)));
    }
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    let l2: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return Ok(0.0);
    }
    let rn = (n as f64).sqrt();
    Ok((rn - l1 / l2) / (rn - 1.0))
}

/// Power-weighted mean frequency in cycles/frame over the AC bins
/// k = 1..T/2 of a mean-subtracted series. Zero AC power gives 0.
pub fn spectral_centroid(s: &[f64]) -> Result<f64> {
    let t = s.len();
    if t < 4 {
        return Err(SgError::invalid("spectral_centroid", format!("need at least 4 samples, got {}", t)));
    }
    let mean = s.iter().sum::<f64>() / t as f64;
    let mut weighted = 0.0;
    let mut total = 0.0;
    for k in 1..=t / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in s.iter().enumerate() {
            let phase = -2.0 * std::f64::consts::PI * (k * i) as f64 / t as f64;
            re += (v - mean) * phase.cos();
            im += (v - mean) * phase.sin();
        }
        let power = re * re + im * im;
        weighted += k as f64 / t as f64 * power;
        total += power;
    }
    // Mean removal of a constant leaves rounding dust; treat power that is
    // negligible against the raw signal energy as silence.
    let energy: f64 = s.iter().map(|v| v * v).sum();
    if total <= 1e-24 * energy.max(1.0) {
        return Ok(0.0);
    }
    Ok(weighted / total)
}

// Median with the even-length convention of averaging the middle pair.
fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Angles between consecutive displacement steps of a trajectory, plus the
/// clip median. A step shorter than the motion guard contributes angle 0.
pub fn angular_curvature(traj: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    if traj.len() < 3 {
        return Err(SgError::invalid(
            "angular_curvature",
            format!("need at least 3 points, got {}", traj.len()),
        ));
    }
    let steps: Vec<Vec<f64>> = traj
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect())
        .collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let angles: Vec<f64> = steps
        .windows(2)
        .map(|w| {
            let (na, nb) = (norm(&w[0]), norm(&w[1]));
            if na < MOTION_EPS || nb < MOTION_EPS {
                return 0.0;
            }
            let dot: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| a * b).sum();
            (dot / (na * nb)).clamp(-1.0, 1.0).acos()
        })
        .collect();
    let med = median(&angles);
    Ok((angles, med))
}

/// Mean, population standard deviation, max, and min of a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatSummary {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub min: f64,
}

/// Summary statistics of a non-empty slice.
pub fn summarize(xs: &[f64]) -> StatSummary {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    StatSummary {
        mean,
        std: var.sqrt(),
        max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        min: xs.iter().cloned().fold(f64::INFINITY, f64::min),
    }
}

/// First- and second-order temporal difference statistics of a feature
/// trajectory, in the Euclidean and cosine-distance metrics.
#[derive(Clone, Copy, Debug)]
pub struct TrajDiffStats {
    pub d1: StatSummary,
    pub d2: StatSummary,
    pub d1_cos: StatSummary,
    pub d2_cos: StatSummary,
}

/// d1_t = ||Z_{t+1} - Z_t||, d2_t = |d1_{t+1} - d1_t|; the cosine variant
/// uses 1 - <z, z'> on L2-normalized features (two zero vectors count as
/// identical, a single zero vector as maximally distant).
pub fn traj_diff_stats(features: &[Vec<f64>]) -> Result<TrajDiffStats> {
    if features.len() < 3 {
        return Err(SgError::invalid(
            "traj_diff_stats",
            format!("need at least 3 frames, got {}", features.len()),
        ));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let d1: Vec<f64> = features
        .windows(2)
        .map(|w| norm(&w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect::<Vec<f64>>()))
        .collect();
    let d2: Vec<f64> = d1.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let d1_cos: Vec<f64> = features
        .windows(2)
        .map(|w| {
            let (na, nb) = (norm(&w[0]), norm(&w[1]));
            match (na < 1e-12, nb < 1e-12) {
                (true, true) => 0.0,
                (true, false) | (false, true) => 1.0,
                _ => {
                    let dot: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| a * b).sum();
                    1.0 - dot / (na * nb)
                }
            }
        })
        .collect();
    let d2_cos: Vec<f64> = d1_cos.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    Ok(TrajDiffStats {
        d1: summarize(&d1),
        d2: summarize(&d2),
        d1_cos: summarize(&d1_cos),
        d2_cos: summarize(&d2_cos),
    })
}

/// Leaky accumulation of non-negative per-frame activity: trace[0] = 0,
/// trace[t] = trace[t-1] * exp(-1/tau) + a[t]. An infinite tau decays
/// nothing and yields the running sum.
pub fn raw_anomaly_trace(a: &[f64], tau_anom: f64) -> Result<Vec<f64>> {
    if !(tau_anom > 0.0) {
        return Err(SgError::invalid("raw_anomaly_trace", format!("tau must be positive, got {}", tau_anom)));
    }
    if a.iter().any(|v| *v < 0.0) {
        return Err(SgError::invalid("raw_anomaly_trace", "activity values must be non-negative"));
    }
    let decay = (-1.0 / tau_anom).exp();
    let mut trace = vec![0.0; a.len()];
    for t in 1..a.len() {
        trace[t] = trace[t - 1] * decay + a[t];
    }
    Ok(trace)
}

/// Outer 1-ring and interior cell masks of a square grid, row-major.
#[derive(Clone, Debug)]
pub struct BoundaryMasks {
    pub grid: usize,
    pub boundary: Vec<bool>,
    pub interior: Vec<bool>,
}

impl BoundaryMasks {
    pub fn new(grid: usize) -> Self {
        let mut boundary = vec![false; grid * grid];
        for i in 0..grid {
            for j in 0..grid {
                if i == 0 || j == 0 || i == grid - 1 || j == grid - 1 {
                    boundary[i * grid + j] = true;
                }
            }
        }
        let interior = boundary.iter().map(|b| !b).collect();
        Self { grid, boundary, interior }
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary.iter().filter(|b| **b).count()
    }

    pub fn interior_count(&self) -> usize {
        self.interior.iter().filter(|b| **b).count()
    }
}

/// Nearest-rank percentile threshold: the ceil(p/100 * n)-th smallest value.
pub fn percentile_threshold(values: &[f64], percentile: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((percentile / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

// Mark cells that sit in a run of at least min_run consecutive active
// entries along the index sequence.
fn mark_runs(active: &[bool], cells: &[usize], min_run: usize, marked: &mut [bool]) {
    let mut start = 0;
    while start < cells.len() {
        if !active[cells[start]] {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < cells.len() && active[cells[end]] {
            end += 1;
        }
        if end - start >= min_run {
            for &c in &cells[start..end] {
                marked[c] = true;
            }
        }
        start = end;
    }
}

/// Boundary and interior run-fire fractions of one active-cell mask:
/// boundary cells in runs of at least `min_run` along each of the four
/// edges (corners counted once), over 4(G-1); interior cells in runs along
/// interior rows and columns, over (G-2)^2.
pub fn run_filtered_fractions(active: &[bool], grid: usize, min_run: usize) -> Result<(f64, f64)> {
    if active.len() != grid * grid || grid < 3 {
        return Err(SgError::shape(
            "run_filtered_fractions",
            format!("mask of {} cells does not fit grid {}", active.len(), grid),
        ));
    }
    let g = grid;
    let mut marked = vec![false; g * g];
    let edges: [Vec<usize>; 4] = [
        (0..g).collect(),                          // top row
        (0..g).map(|j| (g - 1) * g + j).collect(), // bottom row
        (0..g).map(|i| i * g).collect(),           // left column
        (0..g).map(|i| i * g + g - 1).collect(),   // right column
    ];
    for cells in &edges {
        mark_runs(active, cells, min_run, &mut marked);
    }
    let bf = marked.iter().filter(|m| **m).count() as f64 / (4 * (g - 1)) as f64;

    marked.iter_mut().for_each(|m| *m = false);
    for i in 1..g - 1 {
        let row: Vec<usize> = (1..g - 1).map(|j| i * g + j).collect();
        mark_runs(active, &row, min_run, &mut marked);
        let col: Vec<usize> = (1..g - 1).map(|j| j * g + i).collect();
        mark_runs(active, &col, min_run, &mut marked);
    }
    let inf = marked.iter().filter(|m| **m).count() as f64 / ((g - 2) * (g - 2)) as f64;
    Ok((bf, inf))
}

/// Per-clip boundary/interior fire: each frame's active mask is gate value
/// strictly above the frame's own percentile threshold; the clip value is
/// the frame mean of each fraction.
pub fn boundary_interior_fire(maps: &Tensor, percentile: f64, min_run: usize) -> Result<(f64, f64)> {
    let s = maps.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(SgError::shape("boundary_interior_fire", format!("expected [T, G, G], got {:?}", s)));
    }
    let (t, g) = (s[0], s[1]);
    let frame = g * g;
    let (mut bf_sum, mut if_sum) = (0.0, 0.0);
    for ti in 0..t {
        let vals = &maps.data()[ti * frame..(ti + 1) * frame];
        let thr = percentile_threshold(vals, percentile);
        let active: Vec<bool> = vals.iter().map(|v| *v > thr).collect();
        let (bf, inf) = run_filtered_fractions(&active, g, min_run)?;
        bf_sum += bf;
        if_sum += inf;
    }
    Ok((bf_sum / t as f64, if_sum / t as f64))
}

/// Agreement between a gate map and an edge-strength map.
#[derive(Clone, Copy, Debug)]
pub struct EdgeGateOverlap {
    pub pearson: f64,
    pub precision_at_20: f64,
    pub mean_edge: f64,
    pub mean_nonedge: f64,
    pub edge_ratio: f64,
}

/// Pearson of the raw maps, precision of the top-20% gate cells against
/// edge cells (edge strength above its own 70th percentile), and the
/// conditional gate means with their ratio.
pub fn edge_gate_overlap(gate: &Tensor, edge: &Tensor) -> Result<EdgeGateOverlap> {
    if gate.shape() != edge.shape() || gate.numel() == 0 {
        return Err(SgError::shape(
            "edge_gate_overlap",
            format!("maps must align, got {:?} vs {:?}", gate.shape(), edge.shape()),
        ));
    }
    let (g, e) = (gate.data(), edge.data());
    let n = g.len();

    let thr = percentile_threshold(e, 70.0);
    let is_edge: Vec<bool> = e.iter().map(|v| *v > thr).collect();

    let k = (0.2 * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| g[*b].partial_cmp(&g[*a]).unwrap().then(a.cmp(b)));
    let hits = order[..k].iter().filter(|i| is_edge[**i]).count();

    let cond_mean = |want: bool| -> f64 {
        let vals: Vec<f64> = g
            .iter()
            .zip(&is_edge)
            .filter(|(_, m)| **m == want)
            .map(|(v, _)| *v)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let mean_edge = cond_mean(true);
    let mean_nonedge = cond_mean(false);
    let edge_ratio = if mean_nonedge < 1e-12 { 0.0 } else { mean_edge / mean_nonedge };

    Ok(EdgeGateOverlap {
        pearson: pearson(g, e),
        precision_at_20: hits as f64 / k as f64,
        mean_edge,
        mean_nonedge,
        edge_ratio,
    })
}

/// Pearson correlation; either side constant gives 0 by convention.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Rank-based AUROC with ties counted half. Both classes must appear.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SgError::shape(
            "auc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(SgError::invalid("auc", "both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).unwrap());
    // Midranks: tied scores share the average of their rank range.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Tabular per-clip metric values with pool-level aggregate rows.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub metrics: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl MetricReport {
    pub fn new(metrics: Vec<String>) -> Self {
        Self { metrics, rows: Vec::new() }
    }

    pub fn push_row(&mut self, id: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.metrics.len() {
            return Err(SgError::shape(
                "metric_report",
                format!("{} values for {} metrics", values.len(), self.metrics.len()),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(SgError::non_finite("metric_report"));
        }
        self.rows.push((id.into(), values));
        Ok(())
    }

    /// Column means over all clip rows.
    pub fn mean_row(&self) -> Vec<f64> {
        self.column_stat(|c| summarize(c).mean)
    }

    /// Column population standard deviations over all clip rows.
    pub fn std_row(&self) -> Vec<f64> {
        self.column_stat(|c| summarize(c).std)
    }

    fn column_stat(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.metrics.len())
            .map(|j| {
                let col: Vec<f64> = self.rows.iter().map(|(_, r)| r[j]).collect();
                if col.is_empty() {
                    0.0
                } else {
                    f(&col)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn test_hoyer_reference_points() {
        assert_eq!(hoyer(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(hoyer(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((hoyer(&[3.0, 4.0, 0.0, 0.0]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(hoyer(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(hoyer(&[1.0]).is_err());
    }

    #[test]
    fn test_hoyer_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * 37.5).collect();
        assert!((hoyer(&x).unwrap() - hoyer(&scaled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn test_spectral_centroid_reference_points() {
        let constant = vec![0.7; 8];
        assert_eq!(spectral_centroid(&constant).unwrap(), 0.0);

        let cos2: Vec<f64> = (0..8)
            .map(|t| (2.0 * std::f64::consts::PI * 2.0 * t as f64 / 8.0).cos())
            .collect();
        assert!((spectral_centroid(&cos2).unwrap() - 0.25).abs() < 1e-12);

        // Equal-power bins 1 and 3 average to (1/8 + 3/8) / 2.
        let two: Vec<f64> = (0..8)
            .map(|t| {
                let w = 2.0 * std::f64::consts::PI * t as f64 / 8.0;
                w.cos() + (3.0 * w).cos()
            })
            .collect();
        assert!((spectral_centroid(&two).unwrap() - 0.25).abs() < 1e-12);
        assert!(spectral_centroid(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn test_spectral_centroid_amplitude_and_offset_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = spectral_centroid(&s).unwrap();
        let moved: Vec<f64> = s.iter().map(|v| 3.7 * v + 1.3).collect();
        assert!((spectral_centroid(&moved).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn test_angular_curvature_reference_angles() {
        let line: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 0.0]).collect();
        let (angles, med) = angular_curvature(&line).unwrap();
        assert!(angles.iter().all(|a| *a == 0.0));
        assert_eq!(med, 0.0);

        let corner = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let (angles, _) = angular_curvature(&corner).unwrap();
        assert!((angles[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);

        let back = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]];
        let (angles, _) = angular_curvature(&back).unwrap();
        assert!((angles[0] - std::f64::consts::PI).abs() < 1e-12);

        // Even angle count: median averages the middle pair.
        let zig = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![2.0, 1.0],
            vec![2.0, 2.0],
        ];
        let (angles, med) = angular_curvature(&zig).unwrap();
        assert_eq!(angles.len(), 3);
        assert!((med - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn test_traj_diff_stats_straight_line() {
        let constant = vec![vec![0.5, 0.5]; 4];
        let s = traj_diff_stats(&constant).unwrap();
        assert_eq!((s.d1.mean, s.d1.std, s.d1.max, s.d1.min), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(s.d2.mean, 0.0);
        // Unit-normalizing identical vectors leaves rounding dust in the dot.
        assert!(s.d1_cos.mean.abs() < 1e-12);

        let line: Vec<Vec<f64>> = (0..5).map(|i| vec![2.0 * i as f64, 1.0]).collect();
        let s = traj_diff_stats(&line).unwrap();
        assert!((s.d1.mean - 2.0).abs() < 1e-12);
        assert_eq!(s.d1.std, 0.0);
        assert_eq!(s.d2.max, 0.0);
    }

    #[test]
    fn test_traj_diff_stats_matches_loop_oracle() {
        let pts = vec![
            vec![0.0, 0.0, 1.0],
            vec![1.0, 2.0, 0.0],
            vec![-1.0, 1.0, 3.0],
            vec![0.5, -0.5, 2.0],
        ];
        let s = traj_diff_stats(&pts).unwrap();
        let mut d1 = Vec::new();
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..3 {
                let d = pts[i + 1][j] - pts[i][j];
                acc += d * d;
            }
            d1.push(acc.sqrt());
        }
        let d2: Vec<f64> = (0..2).map(|i| (d1[i + 1] - d1[i]).abs()).collect();
        let mean1 = d1.iter().sum::<f64>() / 3.0;
        assert!((s.d1.mean - mean1).abs() < 1e-12);
        assert!((s.d2.max - d2.iter().cloned().fold(f64::MIN, f64::max)).abs() < 1e-12);

        // Cosine variant against its own direct loop.
        let unit = |v: &[f64]| -> Vec<f64> {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| a / n).collect()
        };
        let mut c1 = Vec::new();
        for i in 0..3 {
            let (a, b) = (unit(&pts[i]), unit(&pts[i + 1]));
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            c1.push(1.0 - dot);
        }
        assert!((s.d1_cos.mean - c1.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn test_raw_anomaly_trace_closed_forms() {
        let a = vec![0.3; 6];
        let tau = 4.0;
        let d = (-1.0_f64 / tau).exp();
        let trace = raw_anomaly_trace(&a, tau).unwrap();
        assert_eq!(trace[0], 0.0);
        for (t, v) in trace.iter().enumerate() {
            let want = 0.3 * (1.0 - d.powi(t as i32)) / (1.0 - d);
            assert!((v - want).abs() < 1e-12, "t={}", t);
        }
        let sums = raw_anomaly_trace(&a, f64::INFINITY).unwrap();
        for (t, v) in sums.iter().enumerate() {
            assert!((v - 0.3 * t as f64).abs() < 1e-12);
        }
        assert!(raw_anomaly_trace(&[0.0; 4], 4.0).unwrap().iter().all(|v| *v == 0.0));
        assert!(raw_anomaly_trace(&[-0.1], 4.0).is_err());
    }

    #[test]
    fn test_raw_anomaly_trace_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let base = raw_anomaly_trace(&a, 4.0).unwrap();
        for t in 1..8 {
            let mut bumped = a.clone();
            bumped[t] += 0.5;
            let b = raw_anomaly_trace(&bumped, 4.0).unwrap();
            for i in 0..8 {
                if i >= t {
                    assert!(b[i] >= base[i]);
                } else {
                    assert_eq!(b[i], base[i]);
                }
            }
        }
    }

    #[test]
    fn test_boundary_mask_cardinalities() {
        let m = BoundaryMasks::new(14);
        assert_eq!(m.boundary_count(), 52);
        assert_eq!(m.interior_count(), 144);
        for g in [3, 5, 8, 14] {
            let m = BoundaryMasks::new(g);
            assert_eq!(m.boundary_count(), 4 * (g - 1));
            assert_eq!(m.interior_count(), (g - 2) * (g - 2));
            assert_eq!(m.boundary_count() + m.interior_count(), g * g);
        }
    }

    #[test]
    fn test_run_fractions_idealized_masks() {
        let g = 14;
        let all = vec![true; g * g];
        assert_eq!(run_filtered_fractions(&all, g, 3).unwrap(), (1.0, 1.0));
        let none = vec![false; g * g];
        assert_eq!(run_filtered_fractions(&none, g, 3).unwrap(), (0.0, 0.0));

        // One 5-cell run on the top edge, interior empty.
        let mut mask = vec![false; g * g];
        for j in 4..9 {
            mask[j] = true;
        }
        let (bf, inf) = run_filtered_fractions(&mask, g, 3).unwrap();
        assert!((bf - 5.0 / 52.0).abs() < 1e-12);
        assert_eq!(inf, 0.0);

        // A 2-cell run is below the length cutoff.
        let mut short = vec![false; g * g];
        short[0] = true;
        short[1] = true;
        assert_eq!(run_filtered_fractions(&short, g, 3).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn test_run_fractions_corner_counted_once() {
        // Runs along the top edge and left column meet at corner (0, 0);
        // the corner cell contributes once.
        let g = 14;
        let mut mask = vec![false; g * g];
        for j in 0..3 {
            mask[j] = true; // top: (0,0) (0,1) (0,2)
        }
        for i in 1..3 {
            mask[i * g] = true; // left: (1,0) (2,0); with (0,0) forms a run
        }
        let (bf, _) = run_filtered_fractions(&mask, g, 3).unwrap();
        assert!((bf - 5.0 / 52.0).abs() < 1e-12);
    }

    #[test]
    fn test_boundary_interior_fire_strict_percentile() {
        // Frame values: one cell far above everything, rest equal. The
        // threshold equals the common value, so only the peak is active,
        // and a single cell forms no run.
        let g = 5;
        let mut data = vec![0.2; 2 * g * g];
        data[12] = 0.9;
        data[g * g + 12] = 0.9;
        let maps = Tensor::new(vec![2, g, g], data).unwrap();
        let (bf, inf) = boundary_interior_fire(&maps, 70.0, 3).unwrap();
        assert_eq!((bf, inf), (0.0, 0.0));

        // A full interior row of high cells fires as one run each frame.
        let mut data = vec![0.1; g * g];
        for j in 1..g - 1 {
            data[2 * g + j] = 0.8;
        }
        let maps = Tensor::new(vec![1, g, g], data).unwrap();
        let (bf, inf) = boundary_interior_fire(&maps, 70.0, 3).unwrap();
        assert_eq!(bf, 0.0);
        assert!((inf - 3.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn test_edge_gate_overlap_reference_points() {
        // Two-level maps, perfectly aligned: correlation 1, ratio 2.
        let g = 5;
        let edge: Vec<f64> = (0..g * g).map(|i| if i % 5 == 0 { 0.9 } else { 0.1 }).collect();
        let gate: Vec<f64> = edge.iter().map(|v| if *v > 0.5 { 0.2 } else { 0.1 }).collect();
        let o = edge_gate_overlap(
            &Tensor::new(vec![g, g], gate).unwrap(),
            &Tensor::new(vec![g, g], edge).unwrap(),
        )
        .unwrap();
        assert!((o.pearson - 1.0).abs() < 1e-12);
        assert!((o.edge_ratio - 2.0).abs() < 1e-12);
        assert_eq!(o.precision_at_20, 1.0);
        assert!((o.mean_edge - 0.2).abs() < 1e-12);
        assert!((o.mean_nonedge - 0.1).abs() < 1e-12);
    }

    #[test]
    fn test_edge_gate_overlap_independent_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 1024;
        let gate: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let edge: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let o = edge_gate_overlap(
            &Tensor::new(vec![32, 32], gate).unwrap(),
            &Tensor::new(vec![32, 32], edge).unwrap(),
        )
        .unwrap();
        assert!(o.pearson.abs() < 0.1);
        let constant = Tensor::new(vec![32, 32], vec![0.5; n]).unwrap();
        let flat = edge_gate_overlap(&constant, &constant).unwrap();
        assert_eq!(flat.pearson, 0.0);
    }

    #[test]
    fn test_auc_reference_points() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [false, false, true, true];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());

        // Tied group straddling both classes counts half.
        let s = [0.1, 0.5, 0.5, 0.9];
        let l = [false, false, true, true];
        assert_eq!(auc(&s, &l).unwrap(), 0.875);
    }

    #[test]
    fn test_auc_shuffled_labels_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 2000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let v = auc(&scores, &labels).unwrap();
        assert!((v - 0.5).abs() < 0.05, "auc {}", v);
    }

    #[test]
    fn test_metric_report_aggregates() {
        let mut r = MetricReport::new(vec!["a".to_string(), "b".to_string()]);
        r.push_row("clip0", vec![1.0, 4.0]).unwrap();
        r.push_row("clip1", vec![3.0, 8.0]).unwrap();
        assert_eq!(r.mean_row(), vec![2.0, 6.0]);
        assert_eq!(r.std_row(), vec![1.0, 2.0]);
        assert!(r.push_row("clip2", vec![1.0]).is_err());
        assert!(r.push_row("clip2", vec![f64::NAN, 0.0]).is_err());
    }
}
