//! Pseudo-event channels built from raw clips and patch-embedding motion.
//!
//! Four pixel channels (high-frequency flicker, edge jitter, absolute
//! difference, acceleration) plus two optional trajectory channels
//! (displacement, curvature) are normalized by their temporal mean, pooled
//! to the token grid, scaled by a learnable per-channel gain, and squashed
//! through a soft threshold. Frame 0 has no temporal predecessor and is
//! zeroed in every channel.

use crate::diffcore::{sigmoid, softplus, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Result, SgError};
use serde::{Deserialize, Serialize};

/// Pixel threshold midpoint for raw residual maps.
pub const DEFAULT_C_TH: f64 = 0.10;
/// Grid side; channels pool to grid x grid.
pub const DEFAULT_GRID: usize = 14;
/// Soft-threshold midpoint applied after the learnable gain.
pub const TAU_POST: f64 = 0.1;
/// Soft-threshold sharpness applied after the learnable gain.
pub const S_POST: f64 = 0.05;
/// Added to the temporal mean before dividing, so static inputs stay finite.
pub const NORM_EPS: f64 = 1e-8;
/// Gain log-parameter init; softplus of it is exactly 1.
pub const W_C_INIT: f64 = 0.541324854612918;
/// Displacement norms below this are treated as zero motion.
pub const MOTION_EPS: f64 = 1e-8;

/// Ground-truth class of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Training target: real maps to 0, fake to 1.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn from_target(v: f64) -> Result<Self> {
        match v {
            v if v == 0.0 => Ok(Label::Real),
            v if v == 1.0 => Ok(Label::Fake),
            _ => Err(SgError::invalid("label", format!("target {} is not 0 or 1", v))),
        }
    }
}

/// Raw RGB clip; frames stored [T, H, W, 3] with values in [0, 1].
#[derive(Clone, Debug)]
pub struct Clip {
    pub frames: Tensor,
    pub label: Label,
    pub source: String,
    pub fps: f64,
}

impl Clip {
    pub fn new(frames: Tensor, label: Label, source: impl Into<String>, fps: f64) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(SgError::shape(
                "clip",
                format!("expected [T, H, W, 3], got {:?}", s),
            ));
        }
        if s[0] < 2 {
            return Err(SgError::invalid("clip", format!("need at least 2 frames, got {}", s[0])));
        }
        if !frames.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(SgError::invalid("clip", "frame values must lie in [0, 1]"));
        }
        Ok(Self {
            frames,
            label,
            source: source.into(),
            fps,
        })
    }

    pub fn t(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Pixel value at (frame, row, col, channel).
    pub fn px(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.frames.data()[((t * h + y) * w + x) * 3 + c]
    }

    /// Same clip with the frame order reversed.
    pub fn reversed(&self) -> Self {
        let (t, h, w) = (self.t(), self.height(), self.width());
        let frame = h * w * 3;
        let mut data = Vec::with_capacity(self.frames.numel());
        for i in (0..t).rev() {
            data.extend_from_slice(&self.frames.data()[i * frame..(i + 1) * frame]);
        }
        Self {
            frames: Tensor::raw(self.frames.shape().to_vec(), data),
            label: self.label,
            source: self.source.clone(),
            fps: self.fps,
        }
    }
}

/// Per-frame patch embeddings; tokens stored [T, N, D] in row-major patch
/// order, with an optional clip-level vector.
#[derive(Clone, Debug)]
pub struct EmbeddingSequence {
    pub tokens: Tensor,
    pub video: Option<Tensor>,
}

impl EmbeddingSequence {
    pub fn new(tokens: Tensor, video: Option<Tensor>) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 3 {
            return Err(SgError::shape(
                "embeddings",
                format!("expected [T, N, D], got {:?}", s),
            ));
        }
        let g = (s[1] as f64).sqrt().round() as usize;
        if g * g != s[1] {
            return Err(SgError::shape(
                "embeddings",
                format!("token count {} is not a perfect square", s[1]),
            ));
        }
        if let Some(v) = &video {
            if v.shape().len() != 1 || v.shape()[0] != s[2] {
                return Err(SgError::shape(
                    "embeddings",
                    format!("video vector {:?} does not match token dim {}", v.shape(), s[2]),
                ));
            }
        }
        Ok(Self { tokens, video })
    }

    pub fn t(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Embedding vector of token n at frame t.
    pub fn token(&self, t: usize, n: usize) -> &[f64] {
        let d = self.dim();
        let start = (t * self.n() + n) * d;
        &self.tokens.data()[start..start + d]
    }
}

/// Constants of the event chain; the per-channel gains live in a
/// [`ParamStore`] and are passed to the assembly functions separately.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EventConfig {
    pub c_th: f64,
    pub beta: f64,
    pub grid: usize,
    pub tau_post: f64,
    pub s_post: f64,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self {
            c_th: DEFAULT_C_TH,
            beta: Self::derived_beta(DEFAULT_C_TH),
            grid: DEFAULT_GRID,
            tau_post: TAU_POST,
            s_post: S_POST,
        }
    }
}

impl EventConfig {
    /// Sharpness tied to the threshold: a quarter of it, floored at 1e-6.
    pub fn derived_beta(c_th: f64) -> f64 {
        (c_th * 0.25).max(1e-6)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_th <= 0.0 || self.beta <= 0.0 || self.s_post <= 0.0 || self.grid == 0 {
            return Err(SgError::config(format!(
                "event config needs positive c_th/beta/s_post and grid, got c_th={} beta={} s_post={} grid={}",
                self.c_th, self.beta, self.s_post, self.grid
            )));
        }
        Ok(())
    }
}

/// Assembled event stream: values [T, C, G, G] with channel names.
#[derive(Clone, Debug)]
pub struct EventTensor {
    pub values: Tensor,
    pub channels: Vec<String>,
}

impl EventTensor {
    pub fn t(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn grid(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn at(&self, t: usize, c: usize, i: usize, j: usize) -> f64 {
        let g = self.grid();
        self.values.data()[((t * self.c() + c) * g + i) * g + j]
    }

    /// Frame 0 exactly zero everywhere; later frames in (0, 1]. The top end
    /// is open mathematically but a saturated sigmoid can round to 1.0.
    pub fn validate(&self) -> Result<()> {
        let frame = self.c() * self.grid() * self.grid();
        for (i, v) in self.values.data().iter().enumerate() {
            let ok = if i < frame { *v == 0.0 } else { *v > 0.0 && *v <= 1.0 };
            if !ok {
                return Err(SgError::invalid(
                    "event_tensor",
                    format!("value {} at flat index {} breaks the frame-0/range rule", v, i),
                ));
            }
        }
        Ok(())
    }
}

/// Residual map families; Chroma is analysis-only and never assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualKind {
    Hf,
    Sobel,
    AbsDiff,
    Diff2,
    Chroma,
}

/// The four families assembled into the event tensor, in channel order.
pub const PIXEL_KINDS: [ResidualKind; 4] = [
    ResidualKind::Hf,
    ResidualKind::Sobel,
    ResidualKind::AbsDiff,
    ResidualKind::Diff2,
];

impl ResidualKind {
    pub fn name(self) -> &'static str {
        match self {
            ResidualKind::Hf => "hf",
            ResidualKind::Sobel => "sobel",
            ResidualKind::AbsDiff => "absdiff",
            ResidualKind::Diff2 => "diff2",
            ResidualKind::Chroma => "chroma",
        }
    }

    /// Frames of history a residual frame needs; output length is T minus this.
    pub fn order(self) -> usize {
        match self {
            ResidualKind::Diff2 => 2,
            _ => 1,
        }
    }
}

/// Channel name list for the pixel-only and embedding-augmented layouts.
pub fn channel_names(with_trajectory: bool) -> Vec<String> {
    let mut names: Vec<String> = PIXEL_KINDS.iter().map(|k| k.name().to_string()).collect();
    if with_trajectory {
        names.push("disp".to_string());
        names.push("curv".to_string());
    }
    names
}

/// Register one learnable gain log-parameter per channel, named
/// `events.wc.<channel>`, initialized so the effective gain is 1.
pub fn register_channel_scales(store: &mut ParamStore, names: &[String]) -> Vec<ParamId> {
    names
        .iter()
        .map(|n| {
            store.add(
                format!("events.wc.{}", n),
                Tensor::raw(vec![1], vec![W_C_INIT]),
                true,
            )
        })
        .collect()
}

/// BT.601 luma of every frame: [T, H, W].
pub fn to_luma(clip: &Clip) -> Tensor {
    let (t, h, w) = (clip.t(), clip.height(), clip.width());
    let src = clip.frames.data();
    let mut out = Vec::with_capacity(t * h * w);
    for p in 0..t * h * w {
        out.push(0.299 * src[3 * p] + 0.587 * src[3 * p + 1] + 0.114 * src[3 * p + 2]);
    }
    Tensor::raw(vec![t, h, w], out)
}

// 3x3 cross-correlation with zero padding, kernel in row-major order.
fn filter3x3(src: &[f64], h: usize, w: usize, k: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in 0..3usize {
                let yy = y as isize + dy as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in 0..3usize {
                    let xx = x as isize + dx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += k[dy * 3 + dx] * src[yy as usize * w + xx as usize];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

// Per-frame feature maps whose successive absolute differences form the
// first-order residual families.
fn frame_features(kind: ResidualKind, clip: &Clip) -> Vec<Vec<f64>> {
    let (t, h, w) = (clip.t(), clip.height(), clip.width());
    match kind {
        ResidualKind::Hf => {
            let y = to_luma(clip);
            (0..t)
                .map(|i| filter3x3(&y.data()[i * h * w..(i + 1) * h * w], h, w, &LAPLACIAN))
                .collect()
        }
        ResidualKind::Sobel => {
            let y = to_luma(clip);
            (0..t)
                .map(|i| {
                    let f = &y.data()[i * h * w..(i + 1) * h * w];
                    let gx = filter3x3(f, h, w, &SOBEL_X);
                    let gy = filter3x3(f, h, w, &SOBEL_Y);
                    gx.iter()
                        .zip(&gy)
                        .map(|(a, b)| (a * a + b * b + 1e-6).sqrt())
                        .collect()
                })
                .collect()
        }
        _ => unreachable!("only luma-feature kinds"),
    }
}

// Mean absolute RGB difference maps, one per frame pair.
fn absdiff_maps(clip: &Clip) -> Vec<Vec<f64>> {
    let (t, h, w) = (clip.t(), clip.height(), clip.width());
    let src = clip.frames.data();
    let frame = h * w * 3;
    (1..t)
        .map(|i| {
            let (a, b) = (&src[(i - 1) * frame..i * frame], &src[i * frame..(i + 1) * frame]);
            (0..h * w)
                .map(|p| {
                    ((a[3 * p] - b[3 * p]).abs()
                        + (a[3 * p + 1] - b[3 * p + 1]).abs()
                        + (a[3 * p + 2] - b[3 * p + 2]).abs())
                        / 3.0
                })
                .collect()
        })
        .collect()
}

/// Residual maps of one family: T-1 maps, or T-2 for the second-order kind.
pub fn compute_residual(kind: ResidualKind, clip: &Clip) -> Result<Vec<Tensor>> {
    let (t, h, w) = (clip.t(), clip.height(), clip.width());
    if t < kind.order() + 1 {
        return Err(SgError::invalid(
            "compute_residual",
            format!("{} needs at least {} frames, got {}", kind.name(), kind.order() + 1, t),
        ));
    }
    let diffs = |maps: Vec<Vec<f64>>| -> Vec<Tensor> {
        maps.windows(2)
            .map(|pair| {
                let d: Vec<f64> = pair[0].iter().zip(&pair[1]).map(|(a, b)| (b - a).abs()).collect();
                Tensor::raw(vec![h, w], d)
            })
            .collect()
    };
    Ok(match kind {
        ResidualKind::Hf | ResidualKind::Sobel => diffs(frame_features(kind, clip)),
        ResidualKind::AbsDiff => absdiff_maps(clip)
            .into_iter()
            .map(|d| Tensor::raw(vec![h, w], d))
            .collect(),
        ResidualKind::Diff2 => diffs(absdiff_maps(clip)),
        ResidualKind::Chroma => {
            let src = clip.frames.data();
            let planes: Vec<Vec<f64>> = (0..t)
                .map(|i| {
                    let f = &src[i * h * w * 3..(i + 1) * h * w * 3];
                    (0..h * w)
                        .flat_map(|p| {
                            let (r, g, b) = (f[3 * p], f[3 * p + 1], f[3 * p + 2]);
                            [
                                -0.169 * r - 0.331 * g + 0.500 * b + 0.5,
                                0.500 * r - 0.419 * g - 0.081 * b + 0.5,
                            ]
                        })
                        .collect()
                })
                .collect();
            planes
                .windows(2)
                .map(|pair| {
                    let d: Vec<f64> = (0..h * w)
                        .map(|p| {
                            (pair[1][2 * p] - pair[0][2 * p]).abs()
                                + (pair[1][2 * p + 1] - pair[0][2 * p + 1]).abs()
                        })
                        .collect();
                    Tensor::raw(vec![h, w], d)
                })
                .collect()
        }
    })
}

// Block boundaries of adaptive pooling: cell i covers [i*n/g, (i+1)*n/g).
fn pool_edges(n: usize, g: usize) -> Vec<(usize, usize)> {
    (0..g).map(|i| (i * n / g, (i + 1) * n / g)).collect()
}

fn adaptive_pool_data(src: &[f64], h: usize, w: usize, g: usize) -> Vec<f64> {
    let (rows, cols) = (pool_edges(h, g), pool_edges(w, g));
    let mut out = Vec::with_capacity(g * g);
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            let mut acc = 0.0;
            for y in r0..r1 {
                for x in c0..c1 {
                    acc += src[y * w + x];
                }
            }
            out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    out
}

/// Adaptive average pooling of an [H, W] map down to [g, g].
pub fn adaptive_avg_pool(map: &Tensor, g: usize) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(SgError::shape("adaptive_avg_pool", format!("expected [H, W], got {:?}", s)));
    }
    if s[0] < g || s[1] < g {
        return Err(SgError::invalid(
            "adaptive_avg_pool",
            format!("cannot pool {:?} up to {}x{}", s, g, g),
        ));
    }
    Ok(Tensor::raw(vec![g, g], adaptive_pool_data(map.data(), s[0], s[1], g)))
}

/// Sharp but differentiable exceedance map: sigmoid((delta - c_th) / beta).
pub fn soft_threshold(delta: &Tensor, c_th: f64, beta: f64) -> Result<Tensor> {
    if beta <= 0.0 {
        return Err(SgError::invalid("soft_threshold", format!("beta must be positive, got {}", beta)));
    }
    let inv = 1.0 / beta;
    let out = delta.data().iter().map(|v| sigmoid((v - c_th) * inv)).collect();
    Ok(Tensor::raw(delta.shape().to_vec(), out))
}

/// Temporal-mean normalization and pooling of one residual family, aligned
/// to the clip timeline: output [T, g, g] with the first T - len frames zero.
///
/// This is the gain-independent front of the chain, cacheable per clip.
pub fn pooled_channel(raw: &[Tensor], t_total: usize, g: usize) -> Result<Tensor> {
    if raw.is_empty() || raw.len() >= t_total {
        return Err(SgError::shape(
            "pooled_channel",
            format!("{} residual frames do not fit a {}-frame clip", raw.len(), t_total),
        ));
    }
    let s = raw[0].shape().to_vec();
    if s.len() != 2 || raw.iter().any(|m| m.shape() != s) {
        return Err(SgError::shape("pooled_channel", "residual frames must share one [H, W] shape"));
    }
    if raw.iter().any(|m| m.data().iter().any(|v| *v < 0.0)) {
        return Err(SgError::invalid("pooled_channel", "residual maps must be non-negative"));
    }
    let (h, w) = (s[0], s[1]);
    let mut denom = vec![0.0; h * w];
    for m in raw {
        for (a, v) in denom.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let count = raw.len() as f64;
    for a in &mut denom {
        *a = *a / count + NORM_EPS;
    }
    let pad = t_total - raw.len();
    let mut out = vec![0.0; t_total * g * g];
    for (i, m) in raw.iter().enumerate() {
        let normalized: Vec<f64> = m.data().iter().zip(&denom).map(|(v, d)| v / d).collect();
        let pooled = adaptive_pool_data(&normalized, h, w, g);
        out[(pad + i) * g * g..(pad + i + 1) * g * g].copy_from_slice(&pooled);
    }
    Tensor::new(vec![t_total, g, g], out)
}

/// Gain, soft threshold, and frame-0 mask on a pooled [T, g, g] channel.
pub fn postprocess_tail(pooled: &Tensor, w_c: f64, cfg: &EventConfig) -> Result<Tensor> {
    let s = pooled.shape();
    if s.len() != 3 {
        return Err(SgError::shape("postprocess_tail", format!("expected [T, g, g], got {:?}", s)));
    }
    let sp = softplus(w_c);
    let inv_s = 1.0 / cfg.s_post;
    let mut out: Vec<f64> = pooled
        .data()
        .iter()
        .map(|v| sigmoid((v * sp - cfg.tau_post) * inv_s))
        .collect();
    out[..s[1] * s[2]].fill(0.0);
    Ok(Tensor::raw(s.to_vec(), out))
}

/// Full per-channel chain: normalize, pool, gain, soft threshold, mask.
pub fn postprocess_channel(raw: &[Tensor], t_total: usize, w_c: f64, cfg: &EventConfig) -> Result<Tensor> {
    let pooled = pooled_channel(raw, t_total, cfg.grid)?;
    postprocess_tail(&pooled, w_c, cfg)
}

/// Tape twin of [`postprocess_tail`]; same arithmetic step for step, so the
/// values agree bitwise while gradient flows into the gain parameter.
pub fn postprocess_tail_tape(
    tape: &mut Tape,
    pooled: &Tensor,
    w_node: NodeId,
    cfg: &EventConfig,
) -> Result<NodeId> {
    let s = pooled.shape().to_vec();
    if s.len() != 3 {
        return Err(SgError::shape("postprocess_tail", format!("expected [T, g, g], got {:?}", s)));
    }
    let x = tape.constant(pooled.clone());
    let sp = tape.softplus(w_node)?;
    let gained = tape.scale_by(x, sp)?;
    let shifted = tape.add_scalar(gained, -cfg.tau_post)?;
    let sharp = tape.scale(shifted, 1.0 / cfg.s_post)?;
    let soft = tape.sigmoid(sharp)?;
    let mut keep = vec![1.0; pooled.numel()];
    keep[..s[1] * s[2]].fill(0.0);
    let mask = tape.constant(Tensor::raw(s, keep));
    tape.mul(soft, mask)
}

/// Raw displacement and curvature grid maps from patch trajectories:
/// T-1 displacement maps (from frame 1) and T-2 curvature maps (from
/// frame 2), each [g, g] in row-major token order.
pub fn trajectory_channels(emb: &EmbeddingSequence, g: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if emb.n() != g * g {
        return Err(SgError::shape(
            "trajectory_channels",
            format!("{} tokens do not fill a {}x{} grid", emb.n(), g, g),
        ));
    }
    let (t, n) = (emb.t(), emb.n());
    let step = |t1: usize, tok: usize| -> Vec<f64> {
        emb.token(t1, tok)
            .iter()
            .zip(emb.token(t1 - 1, tok))
            .map(|(a, b)| a - b)
            .collect()
    };
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let disp: Vec<Tensor> = (1..t)
        .map(|ti| {
            let d: Vec<f64> = (0..n).map(|tok| norm(&step(ti, tok))).collect();
            Tensor::raw(vec![g, g], d)
        })
        .collect();
    let curv: Vec<Tensor> = (2..t)
        .map(|ti| {
            let k: Vec<f64> = (0..n)
                .map(|tok| {
                    let (cur, prev) = (step(ti, tok), step(ti - 1, tok));
                    let (nc, np) = (norm(&cur), norm(&prev));
                    if nc < MOTION_EPS || np < MOTION_EPS {
                        return 0.0;
                    }
                    let dot: f64 = cur.iter().zip(&prev).map(|(a, b)| a * b).sum();
                    (dot / (nc * np)).clamp(-1.0, 1.0).acos()
                })
                .collect();
            Tensor::raw(vec![g, g], k)
        })
        .collect();
    Ok((disp, curv))
}

/// Normalized, pooled channels before the learnable gain: one [T, G, G]
/// tensor per channel, pixel families first, trajectories last when present.
pub fn pooled_channels(clip: &Clip, emb: Option<&EmbeddingSequence>, cfg: &EventConfig) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let t = clip.t();
    let mut out = Vec::new();
    for kind in PIXEL_KINDS {
        let raw = compute_residual(kind, clip)?;
        out.push(pooled_channel(&raw, t, cfg.grid)?);
    }
    if let Some(e) = emb {
        if e.t() != t {
            return Err(SgError::shape(
                "pooled_channels",
                format!("embedding frames {} do not match clip frames {}", e.t(), t),
            ));
        }
        let (disp, curv) = trajectory_channels(e, cfg.grid)?;
        out.push(pooled_channel(&disp, t, cfg.grid)?);
        out.push(pooled_channel(&curv, t, cfg.grid)?);
    }
    Ok(out)
}

/// Assemble the event tensor without a tape; gains are the current
/// log-parameter values in channel order.
pub fn assemble_event_tensor(
    clip: &Clip,
    emb: Option<&EmbeddingSequence>,
    cfg: &EventConfig,
    w_c: &[f64],
) -> Result<EventTensor> {
    let channels = channel_names(emb.is_some());
    if w_c.len() != channels.len() {
        return Err(SgError::shape(
            "assemble_event_tensor",
            format!("{} gains for {} channels", w_c.len(), channels.len()),
        ));
    }
    let pooled = pooled_channels(clip, emb, cfg)?;
    let (t, g, c) = (clip.t(), cfg.grid, channels.len());
    let frame = g * g;
    let mut values = vec![0.0; t * c * frame];
    for (ci, p) in pooled.iter().enumerate() {
        let tail = postprocess_tail(p, w_c[ci], cfg)?;
        for ti in 0..t {
            let dst = (ti * c + ci) * frame;
            values[dst..dst + frame].copy_from_slice(&tail.data()[ti * frame..(ti + 1) * frame]);
        }
    }
    Ok(EventTensor {
        values: Tensor::new(vec![t, c, g, g], values)?,
        channels,
    })
}

/// Tape-side assembly from cached pooled channels: one [T, G, G] node per
/// channel with gradient into the staged gain parameters.
pub fn assemble_event_tape(
    tape: &mut Tape,
    staged: &[NodeId],
    gains: &[ParamId],
    pooled: &[Tensor],
    cfg: &EventConfig,
) -> Result<Vec<NodeId>> {
    if gains.len() != pooled.len() {
        return Err(SgError::shape(
            "assemble_event_tape",
            format!("{} gains for {} pooled channels", gains.len(), pooled.len()),
        ));
    }
    pooled
        .iter()
        .zip(gains)
        .map(|(p, id)| postprocess_tail_tape(tape, p, staged[id.index()], cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_clip(t: usize, h: usize, w: usize, seed: u64) -> Clip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..t * h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Clip::new(Tensor::new(vec![t, h, w, 3], data).unwrap(), Label::Real, "test", 8.0).unwrap()
    }

    fn solid_clip(t: usize, h: usize, w: usize, rgb: [f64; 3]) -> Clip {
        let data: Vec<f64> = (0..t * h * w).flat_map(|_| rgb).collect();
        Clip::new(Tensor::new(vec![t, h, w, 3], data).unwrap(), Label::Real, "test", 8.0).unwrap()
    }

    #[test]
    fn test_luma_weights() {
        let white = to_luma(&solid_clip(2, 3, 3, [1.0, 1.0, 1.0]));
        assert!(white.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let red = to_luma(&solid_clip(2, 3, 3, [1.0, 0.0, 0.0]));
        assert!(red.data().iter().all(|v| *v == 0.299));
        let gray = to_luma(&solid_clip(2, 3, 3, [0.5, 0.5, 0.5]));
        assert!(gray.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn test_static_clip_zero_residuals() {
        let clip = solid_clip(4, 6, 6, [0.3, 0.6, 0.2]);
        for kind in [
            ResidualKind::Hf,
            ResidualKind::Sobel,
            ResidualKind::AbsDiff,
            ResidualKind::Diff2,
            ResidualKind::Chroma,
        ] {
            let maps = compute_residual(kind, &clip).unwrap();
            assert_eq!(maps.len(), 4 - kind.order());
            for m in maps {
                assert!(m.data().iter().all(|v| *v == 0.0), "{:?}", kind);
            }
        }
    }

    #[test]
    fn test_residual_needs_enough_frames() {
        let clip = uniform_clip(2, 4, 4, 0);
        assert!(compute_residual(ResidualKind::Diff2, &clip).is_err());
        assert!(compute_residual(ResidualKind::AbsDiff, &clip).is_ok());
    }

    #[test]
    fn test_sobel_band_matches_direct_oracle() {
        // Vertical step edge at col >= 3 in frame 0, col >= 4 in frame 1.
        let (h, w) = (8, 8);
        let mut data = Vec::new();
        for t in 0..2 {
            for _y in 0..h {
                for x in 0..w {
                    let v = if x >= 3 + t { 1.0 } else { 0.0 };
                    data.extend_from_slice(&[v, v, v]);
                }
            }
        }
        let clip = Clip::new(Tensor::new(vec![2, h, w, 3], data).unwrap(), Label::Fake, "edge", 8.0).unwrap();
        let res = compute_residual(ResidualKind::Sobel, &clip).unwrap();
        assert_eq!(res.len(), 1);

        // Independent oracle: direct Sobel magnitude of each luma frame
        // (equal RGB channels, so the white level is the summed weights).
        let lum = 0.299 + 0.587 + 0.114;
        let gray = move |t: usize, y: isize, x: isize| -> f64 {
            if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                return 0.0;
            }
            if x >= 3 + t as isize {
                lum
            } else {
                0.0
            }
        };
        let mag = |t: usize, y: usize, x: usize| -> f64 {
            let (y, x) = (y as isize, x as isize);
            let gx = gray(t, y - 1, x + 1) + 2.0 * gray(t, y, x + 1) + gray(t, y + 1, x + 1)
                - gray(t, y - 1, x - 1)
                - 2.0 * gray(t, y, x - 1)
                - gray(t, y + 1, x - 1);
            let gy = gray(t, y + 1, x - 1) + 2.0 * gray(t, y + 1, x) + gray(t, y + 1, x + 1)
                - gray(t, y - 1, x - 1)
                - 2.0 * gray(t, y - 1, x)
                - gray(t, y - 1, x + 1);
            (gx * gx + gy * gy + 1e-6).sqrt()
        };
        for y in 0..h {
            for x in 0..w {
                let want = (mag(1, y, x) - mag(0, y, x)).abs();
                let got = res[0].data()[y * w + x];
                assert!((got - want).abs() < 1e-9, "({}, {}): {} vs {}", y, x, got, want);
                if !(2..=4).contains(&x) {
                    assert_eq!(got, 0.0, "column {} should be outside the moving band", x);
                }
            }
        }
        assert!(res[0].data().iter().any(|v| *v > 0.1));
    }

    #[test]
    fn test_absdiff_time_reversal_symmetry() {
        let clip = uniform_clip(4, 5, 5, 7);
        let fwd = compute_residual(ResidualKind::AbsDiff, &clip).unwrap();
        let bwd = compute_residual(ResidualKind::AbsDiff, &clip.reversed()).unwrap();
        for i in 0..fwd.len() {
            assert_eq!(fwd[i].data(), bwd[fwd.len() - 1 - i].data());
        }
    }

    #[test]
    fn test_adaptive_pool_block_means() {
        let data: Vec<f64> = (0..28 * 28).map(|i| i as f64).collect();
        let map = Tensor::new(vec![28, 28], data.clone()).unwrap();
        let pooled = adaptive_avg_pool(&map, 14).unwrap();
        for i in 0..14 {
            for j in 0..14 {
                let mut want = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        want += data[(2 * i + dy) * 28 + (2 * j + dx)];
                    }
                }
                want /= 4.0;
                assert_eq!(pooled.data()[i * 14 + j], want);
            }
        }
        // Uneven split: 7 -> 3 gives blocks of 2, 2, 3.
        assert_eq!(pool_edges(7, 3), vec![(0, 2), (2, 4), (4, 7)]);
        // Identity when sizes match.
        let small = Tensor::new(vec![3, 3], (0..9).map(|i| 0.1 * i as f64).collect()).unwrap();
        assert_eq!(adaptive_avg_pool(&small, 3).unwrap().data(), small.data());
    }

    #[test]
    fn test_soft_threshold_reference_points() {
        let cfg = EventConfig::default();
        let map = Tensor::from_vec(vec![cfg.c_th, cfg.c_th + 10.0 * cfg.beta, 0.0]).unwrap();
        let out = soft_threshold(&map, cfg.c_th, cfg.beta).unwrap();
        assert_eq!(out.data()[0], 0.5);
        assert!((out.data()[1] - 0.9999546021312976).abs() < 1e-15);
        assert!((out.data()[2] - 0.017986209962091555).abs() < 1e-15);
        assert!(soft_threshold(&map, 0.1, 0.0).is_err());
    }

    #[test]
    fn test_postprocess_zero_floor_and_alignment() {
        let cfg = EventConfig { grid: 4, ..EventConfig::default() };
        let zeros = vec![Tensor::zeros(vec![8, 8]); 2];
        // Two residual frames in a 4-frame clip: second-order alignment.
        let out = postprocess_channel(&zeros, 4, W_C_INIT, &cfg).unwrap();
        let floor = sigmoid(-2.0);
        assert_eq!(floor, 0.11920292202211755);
        let frame = 16;
        assert!(out.data()[..frame].iter().all(|v| *v == 0.0));
        assert!(out.data()[frame..].iter().all(|v| *v == floor));
    }

    #[test]
    fn test_postprocess_uniform_normalizes_to_one() {
        let raw = vec![
            Tensor::new(vec![4, 4], vec![0.7; 16]).unwrap(),
            Tensor::new(vec![4, 4], vec![0.7; 16]).unwrap(),
        ];
        let pooled = pooled_channel(&raw, 3, 2).unwrap();
        assert!(pooled.data()[..4].iter().all(|v| *v == 0.0));
        assert!(pooled.data()[4..].iter().all(|v| (v - 1.0).abs() < 1e-7));
    }

    #[test]
    fn test_trajectory_reference_angles() {
        // One token on a 1x1 grid, three straight steps then a reversal.
        let tokens = Tensor::new(
            vec![5, 1, 2],
            vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 2.0, 0.0],
        )
        .unwrap();
        let emb = EmbeddingSequence::new(tokens, None).unwrap();
        let (disp, curv) = trajectory_channels(&emb, 1).unwrap();
        assert_eq!(disp.len(), 4);
        assert_eq!(curv.len(), 3);
        assert!(disp.iter().all(|d| d.data()[0] == 1.0));
        assert_eq!(curv[0].data()[0], 0.0);
        assert_eq!(curv[1].data()[0], 0.0);
        assert!((curv[2].data()[0] - std::f64::consts::PI).abs() < 1e-12);

        let flat = EmbeddingSequence::new(Tensor::zeros(vec![4, 1, 2]), None).unwrap();
        let (d0, k0) = trajectory_channels(&flat, 1).unwrap();
        assert!(d0.iter().chain(&k0).all(|m| m.data()[0] == 0.0));
    }

    #[test]
    fn test_trajectory_grid_layout() {
        // Token n moves n units along dim 0: displacement map equals the
        // row-major token index at each grid cell.
        let (g, d) = (2, 3);
        let mut tokens = vec![0.0; 2 * 4 * d];
        for n in 0..4 {
            tokens[(4 + n) * d] = n as f64;
        }
        let emb = EmbeddingSequence::new(Tensor::new(vec![2, 4, d], tokens).unwrap(), None).unwrap();
        let (disp, _) = trajectory_channels(&emb, g).unwrap();
        for n in 0..4 {
            assert_eq!(disp[0].data()[(n / g) * g + (n % g)], n as f64);
        }
    }

    #[test]
    fn test_assemble_static_clip_sits_at_floor() {
        let cfg = EventConfig { grid: 3, ..EventConfig::default() };
        let clip = solid_clip(4, 6, 6, [0.2, 0.5, 0.8]);
        let emb = EmbeddingSequence::new(Tensor::new(vec![4, 9, 2], vec![0.4; 72]).unwrap(), None).unwrap();
        let ev = assemble_event_tensor(&clip, Some(&emb), &cfg, &[W_C_INIT; 6]).unwrap();
        assert_eq!(ev.channels.len(), 6);
        assert_eq!(ev.values.shape(), &[4, 6, 3, 3]);
        let floor = sigmoid(-2.0);
        let frame = 6 * 9;
        assert!(ev.values.data()[..frame].iter().all(|v| *v == 0.0));
        assert!(ev.values.data()[frame..].iter().all(|v| *v == floor));
        ev.validate().unwrap();
    }

    #[test]
    fn test_assemble_pixel_only_channels() {
        let cfg = EventConfig { grid: 4, ..EventConfig::default() };
        let clip = uniform_clip(4, 8, 8, 11);
        let ev = assemble_event_tensor(&clip, None, &cfg, &[W_C_INIT; 4]).unwrap();
        assert_eq!(ev.channels, vec!["hf", "sobel", "absdiff", "diff2"]);
        assert_eq!(ev.values.shape(), &[4, 4, 4, 4]);
        ev.validate().unwrap();
        let floor = sigmoid(-2.0);
        let frame = 4 * 16;
        assert!(ev.values.data()[frame..].iter().all(|v| *v >= floor));
        // Same clip assembled again is identical: the chain is pure.
        let again = assemble_event_tensor(&clip, None, &cfg, &[W_C_INIT; 4]).unwrap();
        assert_eq!(ev.values.data(), again.values.data());
    }

    #[test]
    fn test_tape_assembly_matches_plain_bitwise() {
        let cfg = EventConfig { grid: 4, ..EventConfig::default() };
        let clip = uniform_clip(4, 8, 8, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let tokens: Vec<f64> = (0..4 * 16 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let emb = EmbeddingSequence::new(Tensor::new(vec![4, 16, 3], tokens).unwrap(), None).unwrap();

        let names = channel_names(true);
        let mut store = ParamStore::new();
        let gains = register_channel_scales(&mut store, &names);
        let gain_values = [0.3, 0.55, 0.4, 0.6, 0.5, 0.45];
        for (id, v) in gains.iter().zip(gain_values) {
            store.get_mut(*id).value.data_mut()[0] = v;
        }

        let plain = assemble_event_tensor(&clip, Some(&emb), &cfg, &gain_values).unwrap();
        let pooled = pooled_channels(&clip, Some(&emb), &cfg).unwrap();
        let mut tape = Tape::new();
        let staged = tape.stage_all(&store);
        let nodes = assemble_event_tape(&mut tape, &staged, &gains, &pooled, &cfg).unwrap();

        let frame = 16;
        for (ci, node) in nodes.iter().enumerate() {
            let tv = tape.value(*node);
            assert_eq!(tv.shape(), &[4, 4, 4]);
            for ti in 0..4 {
                for k in 0..frame {
                    let want = plain.values.data()[(ti * 6 + ci) * frame + k];
                    assert_eq!(tv.data()[ti * frame + k], want);
                }
            }
        }

        // Gradient reaches every gain parameter; all chain factors are
        // positive, so each accumulated value must be strictly positive.
        let sums: Vec<NodeId> = nodes.iter().map(|n| tape.sum_all(*n).unwrap()).collect();
        let mut loss = sums[0];
        for s in &sums[1..] {
            loss = tape.add(loss, *s).unwrap();
        }
        tape.backward(loss).unwrap();
        tape.collect_grads(&mut store);
        for id in &gains {
            assert!(store.get(*id).grad[0] > 0.0, "{}", store.get(*id).name);
        }
    }

    #[test]
    fn test_gain_gradient_matches_finite_difference() {
        let pooled = Tensor::new(vec![2, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 0.4, 1.3, 2.1, 0.7]).unwrap();
        let cfg = EventConfig::default();
        let point = Tensor::from_vec(vec![0.37]).unwrap();
        let worst = crate::diffcore::finite_difference_check(&point, 1e-5, |tape, w| {
            let out = postprocess_tail_tape(tape, &pooled, w, &cfg)?;
            tape.mean_all(out)
        })
        .unwrap();
        assert!(worst < 1e-6, "worst rel err {}", worst);
    }

    #[test]
    fn test_event_config_defaults() {
        let cfg = EventConfig::default();
        assert_eq!(cfg.c_th, 0.10);
        assert_eq!(cfg.beta, 0.025);
        assert_eq!(cfg.grid, 14);
        assert_eq!(cfg.tau_post, 0.1);
        assert_eq!(cfg.s_post, 0.05);
        assert_eq!(EventConfig::derived_beta(1e-9), 1e-6);
        assert!((softplus(W_C_INIT) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn test_clip_and_embedding_validation() {
        assert!(Clip::new(Tensor::zeros(vec![1, 4, 4, 3]), Label::Real, "x", 8.0).is_err());
        assert!(Clip::new(Tensor::zeros(vec![2, 4, 4, 2]), Label::Real, "x", 8.0).is_err());
        assert!(Clip::new(
            Tensor::new(vec![2, 1, 1, 3], vec![0.0, 0.5, 1.5, 0.0, 0.0, 0.0]).unwrap(),
            Label::Real,
            "x",
            8.0
        )
        .is_err());
        assert!(EmbeddingSequence::new(Tensor::zeros(vec![2, 5, 3]), None).is_err());
        let emb = EmbeddingSequence::new(Tensor::zeros(vec![2, 4, 3]), None).unwrap();
        assert!(trajectory_channels(&emb, 3).is_err());
    }
}
