//! Three-component PCA projection with a deterministic sign convention.

use crate::error::{Result, SgError};

// Cyclic Jacobi eigensolver for a symmetric n x n matrix (row-major).
// Returns eigenvalues and eigenvectors; eigenvector j is column j.
fn jacobi_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = matrix.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1.0);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m[p * n + q] * m[p * n + q])
            .sum();
        if off.sqrt() < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| m[i * n + i]).collect();
    (vals, v)
}

/// Center the points and project onto the top three principal axes.
///
/// Axes are ordered by decreasing variance; each axis is signed so its
/// largest-magnitude component is positive. Directions with variance at
/// numerical rank tolerance or below project to zero coordinates.
pub fn pca3_project(points: &[Vec<f64>]) -> Result<Vec<[f64; 3]>> {
    let n = points.len();
    if n < 4 {
        return Err(SgError::invalid("pca3_project", format!("need at least 4 points, got {}", n)));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(SgError::shape("pca3_project", "points must share one non-empty dimension"));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let mut cov = vec![0.0; d * d];
    for c in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let tol = 1e-12 * total_var.max(1.0);

    let (vals, vecs) = jacobi_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| vals[*b].partial_cmp(&vals[*a]).unwrap().then(a.cmp(b)));

    let mut axes: Vec<Option<Vec<f64>>> = Vec::with_capacity(3);
    for slot in 0..3 {
        if slot >= d || vals[order[slot]] <= tol {
            axes.push(None);
            continue;
        }
        let col = order[slot];
        let mut axis: Vec<f64> = (0..d).map(|i| vecs[i * d + col]).collect();
        let lead = (0..d).fold(0, |best, i| if axis[i].abs() > axis[best].abs() { i } else { best });
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(Some(axis));
    }

    Ok(centered
        .iter()
        .map(|c| {
            let mut out = [0.0; 3];
            for (slot, axis) in axes.iter().enumerate() {
                if let Some(a) = axis {
                    out[slot] = c.iter().zip(a).map(|(x, v)| x * v).sum();
                }
            }
            out
        })
        .collect())
}
