//! Incremental 3D convex hull volume.

use crate::error::{Result, SgError};

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

// Signed distance factor of point x against the plane of face (a, b, c):
// positive when x lies on the outward-normal side.
fn orient(a: [f64; 3], b: [f64; 3], c: [f64; 3], x: [f64; 3]) -> f64 {
    dot(cross(sub(b, a), sub(c, a)), sub(x, a))
}

// Pick four points spanning a tetrahedron: extreme pair, then the point
// farthest from their line, then the point farthest from their plane.
fn initial_tetra(pts: &[[f64; 3]], eps: f64) -> Option<[usize; 4]> {
    let mut i0 = 0;
    let mut i1 = 0;
    let mut best = -1.0;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let d = dot(sub(pts[i], pts[j]), sub(pts[i], pts[j]));
            if d > best {
                best = d;
                i0 = i;
                i1 = j;
            }
        }
    }
    if best <= eps * eps {
        return None;
    }
    let (mut i2, mut area) = (0, -1.0);
    for (i, p) in pts.iter().enumerate() {
        let c = cross(sub(pts[i1], pts[i0]), sub(*p, pts[i0]));
        let a = dot(c, c);
        if a > area {
            area = a;
            i2 = i;
        }
    }
    if area.sqrt() <= eps * eps {
        return None;
    }
    let (mut i3, mut vol) = (0, -1.0);
    for (i, p) in pts.iter().enumerate() {
        let v = orient(pts[i0], pts[i1], pts[i2], *p).abs();
        if v > vol {
            vol = v;
            i3 = i;
        }
    }
    if vol <= eps * eps * eps {
        return None;
    }
    Some([i0, i1, i2, i3])
}

/// Volume of the convex hull of a 3D point set. Degenerate sets (all
/// points within numerical tolerance of a plane) have volume 0; fewer
/// than four points are an error.
pub fn convex_hull_volume(points: &[[f64; 3]]) -> Result<f64> {
    if points.len() < 4 {
        return Err(SgError::invalid(
            "convex_hull_volume",
            format!("need at least 4 points, got {}", points.len()),
        ));
    }
    let scale = points
        .iter()
        .flat_map(|p| p.iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
        .max(1.0);
    let eps = 1e-9 * scale;

    let Some(seed) = initial_tetra(points, eps) else {
        return Ok(0.0);
    };
    // Faces oriented outward: the opposite seed vertex sits on the
    // negative side of each.
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (f, opp) in [
        ([seed[0], seed[1], seed[2]], seed[3]),
        ([seed[0], seed[1], seed[3]], seed[2]),
        ([seed[0], seed[2], seed[3]], seed[1]),
        ([seed[1], seed[2], seed[3]], seed[0]),
    ] {
        if orient(points[f[0]], points[f[1]], points[f[2]], points[opp]) > 0.0 {
            faces.push([f[0], f[2], f[1]]);
        } else {
            faces.push(f);
        }
    }

    for (pi, p) in points.iter().enumerate() {
        if seed.contains(&pi) {
            continue;
        }
        let visible: Vec<usize> = (0..faces.len())
            .filter(|&fi| {
                let f = faces[fi];
                orient(points[f[0]], points[f[1]], points[f[2]], *p) > eps * eps * eps
            })
            .collect();
        if visible.is_empty() {
            continue;
        }
        // Horizon: directed edges of visible faces whose reverse is not
        // also part of a visible face.
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for &fi in &visible {
            let f = faces[fi];
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                if let Some(pos) = edges.iter().position(|e| *e == (b, a)) {
                    edges.swap_remove(pos);
                } else {
                    edges.push((a, b));
                }
            }
        }
        for &fi in visible.iter().rev() {
            faces.swap_remove(fi);
        }
        for (a, b) in edges {
            faces.push([a, b, pi]);
        }
    }

    let vol: f64 = faces
        .iter()
        .map(|f| dot(points[f[0]], cross(points[f[1]], points[f[2]])) / 6.0)
        .sum();
    Ok(vol.max(0.0))
}
