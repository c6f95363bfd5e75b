//! Deterministic synthetic clips and embeddings with two temporal signatures.
//!
//! Natural-class clips move a soft shape over value-noise texture and add
//! independent per-frame flicker, so residual energy is broadband. Generated
//! clips cross-fade between two keyframes of the same content under an eased
//! blend, so residual energy concentrates in the lowest temporal frequencies.
//! Embedding trajectories mirror the split: natural tokens follow random
//! walks with fresh directions (high curvature, fat hull), generated tokens
//! ride a spherical arc between two anchors (low curvature, flat hull).
//! Natural and generated outputs for the same seed share all content draws,
//! so paired comparisons isolate the temporal structure.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Result, SgError};
use crate::events::{Clip, EmbeddingSequence, Label};
use crate::io::{read_ct01, save_manifest, write_ct01, ManifestEntry};

pub const DEFAULT_FRAMES: usize = 8;
pub const DEFAULT_SIZE: usize = 56;
pub const DEFAULT_EMB_DIM: usize = 32;
pub const DEFAULT_TOKENS: usize = 196;
pub const DEFAULT_SPEED: f64 = 2.0;
pub const DEFAULT_FLICKER: f64 = 0.15;
pub const DEFAULT_TEXTURE_SCALE: f64 = 8.0;
pub const DEFAULT_SMOOTHNESS: f64 = 1.0;

// stream salts keep flicker and embedding draws out of the content stream,
// so both classes of the same seed see identical content randomness
const FLICKER_SALT: u64 = 0x9e3779b97f4a7c15;
const EMB_SALT: u64 = 0xd1b54a32d192ed03;

/// Walk step scale for natural-class embedding trajectories.
const WALK_STEP: f64 = 0.5;
/// Arc angle between the two generated-class anchors, radians.
const ARC_ANGLE: f64 = 1.0;

/// Which temporal signature to synthesize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthClass {
    Natural,
    Generated,
}

impl SynthClass {
    pub fn label(self) -> Label {
        match self {
            SynthClass::Natural => Label::Real,
            SynthClass::Generated => Label::Fake,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::Natural => "natural",
            SynthClass::Generated => "generated",
        }
    }
}

/// Full recipe for one synthetic clip; equal specs give bit-equal output.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub class: SynthClass,
    pub frames: usize,
    pub size: usize,
    pub speed: f64,
    pub flicker: f64,
    pub texture_scale: f64,
    pub smoothness: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(class: SynthClass, seed: u64) -> Self {
        Self {
            class,
            frames: DEFAULT_FRAMES,
            size: DEFAULT_SIZE,
            speed: DEFAULT_SPEED,
            flicker: DEFAULT_FLICKER,
            texture_scale: DEFAULT_TEXTURE_SCALE,
            smoothness: DEFAULT_SMOOTHNESS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.size < 8 {
            return Err(SgError::invalid(
                "synth_spec",
                format!("need frames >= 2 and size >= 8, got {} and {}", self.frames, self.size),
            ));
        }
        let finite = self.speed.is_finite() && self.flicker.is_finite() && self.smoothness.is_finite();
        if !finite || self.speed < 0.0 || self.flicker < 0.0 || !(0.0..=1.0).contains(&self.smoothness) {
            return Err(SgError::invalid(
                "synth_spec",
                "speed and flicker must be finite and non-negative, smoothness in [0, 1]",
            ));
        }
        if !(self.texture_scale >= 1.0) {
            return Err(SgError::invalid("synth_spec", "texture_scale must be >= 1"));
        }
        Ok(())
    }
}

// content draws shared by both classes of one seed
struct Content {
    grids: [Vec<f64>; 3],
    cells: usize,
    start: (f64, f64),
    velocity: (f64, f64),
    color: [f64; 3],
    radius: f64,
}

fn draw_content(spec: &SynthSpec) -> Content {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells = (spec.size as f64 / spec.texture_scale).ceil() as usize + 2;
    let mut grids: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for grid in &mut grids {
        *grid = (0..cells * cells).map(|_| rng.gen_range(0.2..0.8)).collect();
    }
    let s = spec.size as f64;
    let start = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let velocity = (spec.speed * angle.cos(), spec.speed * angle.sin());
    let color = [
        rng.gen_range(0.6..1.0),
        rng.gen_range(0.6..1.0),
        rng.gen_range(0.6..1.0),
    ];
    Content {
        grids,
        cells,
        start,
        velocity,
        color,
        radius: s / 7.0,
    }
}

fn bilinear(grid: &[f64], cells: usize, x: f64, y: f64) -> f64 {
    let max = (cells - 1) as f64 - 1e-9;
    let gx = x.clamp(0.0, max);
    let gy = y.clamp(0.0, max);
    let (i, j) = (gy as usize, gx as usize);
    let (fy, fx) = (gy - i as f64, gx - j as f64);
    let row0 = grid[i * cells + j] * (1.0 - fx) + grid[i * cells + j + 1] * fx;
    let row1 = grid[(i + 1) * cells + j] * (1.0 - fx) + grid[(i + 1) * cells + j + 1] * fx;
    row0 * (1.0 - fy) + row1 * fy
}

// texture plus a soft Gaussian blob at `pos`, one frame, row-major HWC
fn compose_frame(spec: &SynthSpec, content: &Content, pos: (f64, f64)) -> Vec<f64> {
    let size = spec.size;
    let inv_two_sigma_sq = 1.0 / (2.0 * (content.radius / 2.0).powi(2));
    let mut frame = Vec::with_capacity(size * size * 3);
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64, yi as f64);
            let d2 = (x - pos.0).powi(2) + (y - pos.1).powi(2);
            let m = (-d2 * inv_two_sigma_sq).exp();
            for c in 0..3 {
                let base = bilinear(
                    &content.grids[c],
                    content.cells,
                    x / spec.texture_scale,
                    y / spec.texture_scale,
                );
                frame.push((base * (1.0 - m) + content.color[c] * m).clamp(0.0, 1.0));
            }
        }
    }
    frame
}

// cubic ease between keyframes; s=0 linear, s=1 full smoothstep
fn blend_curve(u: f64, smoothness: f64) -> f64 {
    let eased = u * u * (3.0 - 2.0 * u);
    (1.0 - smoothness) * u + smoothness * eased
}

/// Synthesize one clip according to the spec.
pub fn gen_clip(spec: &SynthSpec) -> Result<Clip> {
    spec.validate()?;
    let content = draw_content(spec);
    let (t, size) = (spec.frames, spec.size);
    let mut data = Vec::with_capacity(t * size * size * 3);
    match spec.class {
        SynthClass::Natural => {
            let mut flicker_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ FLICKER_SALT);
            for ti in 0..t {
                let pos = (
                    content.start.0 + content.velocity.0 * ti as f64,
                    content.start.1 + content.velocity.1 * ti as f64,
                );
                let mut frame = compose_frame(spec, &content, pos);
                if spec.flicker > 0.0 {
                    let amp = spec.flicker * flicker_rng.gen_range(0.5..1.5);
                    for v in &mut frame {
                        *v = (*v + amp * flicker_rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0);
                    }
                }
                data.extend_from_slice(&frame);
            }
        }
        SynthClass::Generated => {
            let end = (
                content.start.0 + content.velocity.0 * (t - 1) as f64,
                content.start.1 + content.velocity.1 * (t - 1) as f64,
            );
            let k0 = compose_frame(spec, &content, content.start);
            let k1 = compose_frame(spec, &content, end);
            for ti in 0..t {
                let u = ti as f64 / (t - 1) as f64;
                let a = blend_curve(u, spec.smoothness);
                for (v0, v1) in k0.iter().zip(&k1) {
                    data.push((v0 * (1.0 - a) + v1 * a).clamp(0.0, 1.0));
                }
            }
        }
    }
    let frames = Tensor::new(vec![t, size, size, 3], data)?;
    Clip::new(
        frames,
        spec.class.label(),
        format!("synth-{}-{}", spec.class.name(), spec.seed),
        8.0,
    )
}

/// Spherical interpolation path from a0 to a1 in `steps` points, eased by
/// `smooth` as in the clip blend. Equal anchors give a constant path.
pub fn slerp_path(a0: &[f64], a1: &[f64], steps: usize, smooth: f64) -> Vec<Vec<f64>> {
    let dot: f64 = a0.iter().zip(a1).map(|(x, y)| x * y).sum();
    let n0 = a0.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n1 = a1.iter().map(|x| x * x).sum::<f64>().sqrt();
    let omega = if n0 < 1e-12 || n1 < 1e-12 {
        0.0
    } else {
        (dot / (n0 * n1)).clamp(-1.0, 1.0).acos()
    };
    let mut path = Vec::with_capacity(steps);
    for ti in 0..steps {
        let u = if steps > 1 { ti as f64 / (steps - 1) as f64 } else { 0.0 };
        let a = blend_curve(u, smooth);
        if omega < 1e-9 {
            path.push(a0.to_vec());
        } else {
            let c0 = ((1.0 - a) * omega).sin() / omega.sin();
            let c1 = (a * omega).sin() / omega.sin();
            path.push(a0.iter().zip(a1).map(|(x, y)| c0 * x + c1 * y).collect());
        }
    }
    path
}

// unit vector orthogonal to `a`, built from a random draw by Gram-Schmidt
fn orthogonal_unit(rng: &mut ChaCha8Rng, a: &[f64]) -> Vec<f64> {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    loop {
        let raw: Vec<f64> = (0..a.len()).map(|_| gaussian(rng)).collect();
        let proj: f64 = raw.iter().zip(a).map(|(r, x)| r * x).sum::<f64>() / (na * na);
        let orth: Vec<f64> = raw.iter().zip(a).map(|(r, x)| r - proj * x).collect();
        let norm: f64 = orth.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return orth.into_iter().map(|x| x / norm).collect();
        }
    }
}

// Box-Muller from two uniform draws
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Synthesize per-frame token embeddings [T, N, D] for the spec's class.
pub fn gen_embeddings(spec: &SynthSpec, d: usize, n: usize) -> Result<EmbeddingSequence> {
    spec.validate()?;
    if d == 0 {
        return Err(SgError::invalid("gen_embeddings", "dimension must be positive"));
    }
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(SgError::invalid(
            "gen_embeddings",
            format!("token count {} is not a perfect square", n),
        ));
    }
    let t = spec.frames;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ EMB_SALT);
    let mut data = vec![0.0; t * n * d];
    let radius = (d as f64).sqrt();
    for token in 0..n {
        let path = match spec.class {
            SynthClass::Natural => {
                let mut z: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
                let mut path = Vec::with_capacity(t);
                path.push(z.clone());
                for _ in 1..t {
                    for zi in &mut z {
                        *zi += WALK_STEP * gaussian(&mut rng);
                    }
                    path.push(z.clone());
                }
                path
            }
            SynthClass::Generated => {
                let raw: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
                let norm: f64 = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let a0: Vec<f64> = raw.iter().map(|x| x * radius / norm).collect();
                let u = orthogonal_unit(&mut rng, &a0);
                let a1: Vec<f64> = a0
                    .iter()
                    .zip(&u)
                    .map(|(x, ui)| ARC_ANGLE.cos() * x + ARC_ANGLE.sin() * radius * ui)
                    .collect();
                slerp_path(&a0, &a1, t, spec.smoothness)
            }
        };
        for (ti, z) in path.iter().enumerate() {
            data[(ti * n + token) * d..(ti * n + token) * d + d].copy_from_slice(z);
        }
    }
    EmbeddingSequence::new(Tensor::new(vec![t, n, d], data)?, None)
}

/// Write a balanced dataset under `out_dir`: clip and embedding CT01 files
/// plus `manifest.json`. The template's class is ignored; its seed is the
/// base, and sample i of both classes uses seed base + i so pairs share
/// content. Entries interleave natural and generated.
pub fn make_dataset(n_per_class: usize, template: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    if n_per_class == 0 {
        return Err(SgError::invalid("make_dataset", "need at least one clip per class"));
    }
    template.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        for class in [SynthClass::Natural, SynthClass::Generated] {
            let mut spec = template.clone();
            spec.class = class;
            spec.seed = template.seed + i as u64;
            let clip = gen_clip(&spec)?;
            let emb = gen_embeddings(&spec, DEFAULT_EMB_DIM, DEFAULT_TOKENS)?;
            let clip_name = format!("clip_{}_{:04}.ct01", class.name(), i);
            let emb_name = format!("emb_{}_{:04}.ct01", class.name(), i);
            write_ct01(&out_dir.join(&clip_name), &clip.frames)?;
            write_ct01(&out_dir.join(&emb_name), &emb.tokens)?;
            entries.push(ManifestEntry {
                clip: clip_name,
                embedding: Some(emb_name),
                label: spec.class.label().target() as u8,
                seed: spec.seed,
            });
        }
    }
    save_manifest(&out_dir.join("manifest.json"), &entries)?;
    Ok(entries)
}

/// Load one manifest entry back into memory.
pub fn load_sample(base: &Path, entry: &ManifestEntry) -> Result<(Clip, Option<EmbeddingSequence>)> {
    let frames = read_ct01(&entry.clip_path(base))?;
    let label = Label::from_target(entry.label as f64)?;
    let clip = Clip::new(frames, label, entry.clip.clone(), 8.0)?;
    let emb = match entry.embedding_path(base) {
        Some(path) => Some(EmbeddingSequence::new(read_ct01(&path)?, None)?),
        None => None,
    };
    Ok((clip, emb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{compute_residual, ResidualKind};
    use crate::metrics::{angular_curvature, convex_hull_volume, pca3_project, spectral_centroid};

    fn small(class: SynthClass, seed: u64) -> SynthSpec {
        let mut spec = SynthSpec::new(class, seed);
        spec.size = 28;
        spec
    }

    #[test]
    fn test_same_spec_is_bit_identical() {
        let spec = small(SynthClass::Natural, 5);
        let a = gen_clip(&spec).unwrap();
        let b = gen_clip(&spec).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
        let ea = gen_embeddings(&spec, 8, 16).unwrap();
        let eb = gen_embeddings(&spec, 8, 16).unwrap();
        assert_eq!(ea.tokens.data(), eb.tokens.data());
    }

    #[test]
    fn test_clip_shape_and_range() {
        for class in [SynthClass::Natural, SynthClass::Generated] {
            let clip = gen_clip(&small(class, 3)).unwrap();
            assert_eq!(clip.frames.shape(), &[8, 28, 28, 3]);
            assert!(clip.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(clip.label, class.label());
        }
    }

    #[test]
    fn test_zero_speed_zero_flicker_is_static() {
        for class in [SynthClass::Natural, SynthClass::Generated] {
            let mut spec = small(class, 9);
            spec.speed = 0.0;
            spec.flicker = 0.0;
            let clip = gen_clip(&spec).unwrap();
            let frame = 28 * 28 * 3;
            let first = &clip.frames.data()[..frame];
            for t in 1..clip.t() {
                let cur = &clip.frames.data()[t * frame..(t + 1) * frame];
                let max_dev = first
                    .iter()
                    .zip(cur)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                // generated frames blend two equal keyframes, so only
                // rounding dust can differ
                assert!(max_dev < 1e-15, "class {:?} frame {} deviates {}", class, t, max_dev);
            }
        }
    }

    #[test]
    fn test_classes_share_content_at_frame_zero() {
        // same seed, flicker suppressed: frame 0 is the same keyframe
        let mut nat = small(SynthClass::Natural, 21);
        nat.flicker = 0.0;
        let gen = small(SynthClass::Generated, 21);
        let a = gen_clip(&nat).unwrap();
        let b = gen_clip(&gen).unwrap();
        let frame = 28 * 28 * 3;
        assert_eq!(a.frames.data()[..frame], b.frames.data()[..frame]);
    }

    #[test]
    fn test_flicker_class_has_higher_spectral_centroid() {
        let mut wins = 0;
        for seed in 0..50 {
            let mut fcs = [0.0; 2];
            for (slot, class) in [SynthClass::Natural, SynthClass::Generated].into_iter().enumerate() {
                let clip = gen_clip(&small(class, seed)).unwrap();
                let maps = compute_residual(ResidualKind::Hf, &clip).unwrap();
                let series: Vec<f64> = maps
                    .iter()
                    .map(|m| m.data().iter().sum::<f64>() / m.numel() as f64)
                    .collect();
                fcs[slot] = spectral_centroid(&series).unwrap();
            }
            if fcs[0] > fcs[1] {
                wins += 1;
            }
        }
        assert!(wins >= 45, "natural wins only {}/50", wins);
    }

    #[test]
    fn test_slerp_path_equal_anchors_is_constant() {
        let a = vec![1.0, 2.0, -3.0];
        let path = slerp_path(&a, &a, 6, 1.0);
        for p in &path {
            assert_eq!(p, &a);
        }
    }

    #[test]
    fn test_slerp_path_endpoints() {
        let a0 = vec![2.0, 0.0];
        let a1 = vec![0.0, 2.0];
        let path = slerp_path(&a0, &a1, 5, 0.0);
        assert!(path[0].iter().zip(&a0).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(path[4].iter().zip(&a1).all(|(x, y)| (x - y).abs() < 1e-12));
        // quarter-circle midpoint keeps the radius
        let mid_norm = (path[2][0].powi(2) + path[2][1].powi(2)).sqrt();
        assert!((mid_norm - 2.0).abs() < 1e-12);
    }

    #[test]
    fn test_embedding_curvature_ordering() {
        let mut gen_meds = Vec::new();
        let mut nat_meds = Vec::new();
        for seed in 0..50 {
            for class in [SynthClass::Natural, SynthClass::Generated] {
                let emb = gen_embeddings(&small(class, seed), 16, 4).unwrap();
                let traj: Vec<Vec<f64>> = (0..emb.t()).map(|t| emb.token(t, 0).to_vec()).collect();
                let (_, med) = angular_curvature(&traj).unwrap();
                match class {
                    SynthClass::Natural => nat_meds.push(med),
                    SynthClass::Generated => gen_meds.push(med),
                }
            }
        }
        let mid = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(mid(gen_meds) < mid(nat_meds));
    }

    #[test]
    fn test_hull_volume_ordering_over_paired_seeds() {
        let mut wins = 0;
        for seed in 0..50 {
            let mut vols = [0.0; 2];
            for (slot, class) in [SynthClass::Natural, SynthClass::Generated].into_iter().enumerate() {
                let emb = gen_embeddings(&small(class, seed), 16, 4).unwrap();
                let traj: Vec<Vec<f64>> = (0..emb.t()).map(|t| emb.token(t, 1).to_vec()).collect();
                let pts = pca3_project(&traj).unwrap();
                vols[slot] = convex_hull_volume(&pts).unwrap();
            }
            if vols[0] > vols[1] {
                wins += 1;
            }
        }
        assert!(wins >= 45, "natural hull wins only {}/50", wins);
    }

    #[test]
    fn test_make_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut template = small(SynthClass::Natural, 100);
        template.frames = 4;
        let entries = make_dataset(2, &template, dir.path()).unwrap();
        assert_eq!(entries.len(), 4);
        assert_eq!(entries.iter().filter(|e| e.label == 0).count(), 2);
        assert_eq!(entries.iter().filter(|e| e.label == 1).count(), 2);
        let clips = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with("clip_")
            })
            .count();
        assert_eq!(clips, 4);

        let (clip, emb) = load_sample(dir.path(), &entries[1]).unwrap();
        assert_eq!(clip.label, Label::Fake);
        assert_eq!(clip.t(), 4);
        assert_eq!(emb.unwrap().tokens.shape(), &[4, DEFAULT_TOKENS, DEFAULT_EMB_DIM]);
    }

    #[test]
    fn test_make_dataset_regeneration_is_byte_equal() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut template = small(SynthClass::Natural, 7);
        template.frames = 3;
        make_dataset(1, &template, dir_a.path()).unwrap();
        make_dataset(1, &template, dir_b.path()).unwrap();
        for name in [
            "clip_natural_0000.ct01",
            "clip_generated_0000.ct01",
            "emb_natural_0000.ct01",
            "emb_generated_0000.ct01",
            "manifest.json",
        ] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{} differs between regenerations", name);
        }
    }

    #[test]
    fn test_invalid_specs_rejected() {
        let mut spec = small(SynthClass::Natural, 1);
        spec.frames = 1;
        assert!(gen_clip(&spec).is_err());
        let mut spec = small(SynthClass::Natural, 1);
        spec.speed = -1.0;
        assert!(gen_clip(&spec).is_err());
        assert!(gen_embeddings(&small(SynthClass::Natural, 1), 8, 5).is_err());
    }
}
