//! Objective, optimizer, and the epoch loop.
//!
//! The loss couples main and auxiliary classification, a supervised
//! contrastive term over the fused features, and a soft firing-rate prior.
//! Each step forwards every clip on its own tape, joins the per-clip
//! features on a small batch tape where all loss terms live, then
//! backpropagates the feature cotangents through each clip tape. Gradients
//! accumulate in the parameter store; a global-norm clip, a decoupled
//! weight-decay adaptive-moment update, and a hard clamp on the neuron
//! constants close the step.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, ParamStore, Tape, Tensor};
use crate::error::{Result, SgError};
use crate::events::{pooled_channels, Clip, EmbeddingSequence, EventConfig};
use crate::gatenet::{video_vector, ForwardOutput, GateNet};
use crate::io::{save_checkpoint, Checkpoint};
use crate::metrics::auc;
use crate::snn::{TAU_BASE, TAU_MAX, TAU_MIN, VTH_MAX, VTH_MIN};

/// Gradient threshold under which the auxiliary head counts as silent.
pub const SILENT_GRAD_NORM: f64 = 1e-8;
// probability clamp for the log terms
const P_EPS: f64 = 1e-7;

/// Objective weights and optimizer settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Auxiliary spiking-head BCE weight.
    pub lambda_aux: f64,
    /// Supervised contrastive weight.
    pub lambda_supcon: f64,
    /// Firing-rate penalty weight.
    pub lambda_rate: f64,
    pub target_rate: f64,
    pub tau_con: f64,
    pub label_smoothing: f64,
    /// Optional trace-supervision BCE; disabled at 0.
    pub lambda_anom: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            lambda_aux: 0.2,
            lambda_supcon: 0.3,
            lambda_rate: 0.01,
            target_rate: 0.15,
            tau_con: 0.07,
            label_smoothing: 0.1,
            lambda_anom: 0.0,
            epochs: 30,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_aux,
            self.lambda_supcon,
            self.lambda_rate,
            self.lambda_anom,
            self.weight_decay,
        ];
        if weights.iter().any(|w| *w < 0.0) || self.lr < 0.0 {
            return Err(SgError::config("loss weights and rates must be non-negative"));
        }
        if self.tau_con <= 0.0 || self.clip_norm <= 0.0 || self.batch_size == 0 {
            return Err(SgError::config(
                "tau_con, clip_norm, and batch_size must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(SgError::config("label smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One clip prepared for training: cached pooled event channels plus the
/// optional clip-level embedding vector.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub pooled: Vec<Tensor>,
    pub video: Option<Tensor>,
    pub label: u8,
}

impl ClipSample {
    /// Pool a clip (and optional embeddings) once for reuse across epochs.
    pub fn prepare(
        clip: &Clip,
        emb: Option<&EmbeddingSequence>,
        event_cfg: &EventConfig,
        want_video: bool,
    ) -> Result<Self> {
        let pooled = pooled_channels(clip, emb, event_cfg)?;
        let video = match (want_video, emb) {
            (true, Some(e)) => Some(video_vector(e)),
            (true, None) => {
                return Err(SgError::invalid(
                    "clip_sample",
                    "video head requested but the sample has no embeddings",
                ));
            }
            (false, _) => None,
        };
        Ok(Self {
            pooled,
            video,
            label: clip.label.target() as u8,
        })
    }
}

/// Binary cross-entropy with label smoothing; p is clamped away from 0/1.
pub fn bce(p: f64, y: f64, smoothing: f64) -> f64 {
    let target = y * (1.0 - smoothing) + 0.5 * smoothing;
    let pc = p.clamp(P_EPS, 1.0 - P_EPS);
    -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln())
}

/// Firing-rate prior beta * (sbar - target)^2.
pub fn rate_penalty(sbar: f64, beta: f64, target: f64) -> f64 {
    beta * (sbar - target) * (sbar - target)
}

/// Supervised contrastive loss, direct double-loop form. Features are
/// L2-normalized internally; anchors without a positive are skipped and
/// excluded from the mean.
pub fn supcon_reference(features: &[Vec<f64>], labels: &[u8], tau: f64) -> f64 {
    let b = features.len();
    if b < 2 {
        return 0.0;
    }
    let normed: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-12 {
                f.clone()
            } else {
                f.iter().map(|x| x / n).collect()
            }
        })
        .collect();
    let dot = |i: usize, j: usize| -> f64 {
        normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum()
    };
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..b {
        let positives: Vec<usize> = (0..b)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let den: f64 = (0..b)
            .filter(|&j| j != i)
            .map(|j| (dot(i, j) / tau).exp())
            .sum();
        let mut inner = 0.0;
        for &p in &positives {
            inner += dot(i, p) / tau - den.ln();
        }
        total -= inner / positives.len() as f64;
        anchors += 1;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

// bce as tape ops on a probability node; target is a plain smoothed label
fn bce_on_tape(tape: &mut Tape, p: NodeId, target: f64) -> Result<NodeId> {
    let pc = tape.clamp(p, P_EPS, 1.0 - P_EPS)?;
    let log_p = tape.log(pc)?;
    let neg = tape.scale(pc, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let a = tape.scale(log_p, -target)?;
    let b = tape.scale(log_q, -(1.0 - target))?;
    tape.add(a, b)
}

// supervised contrastive term over feature nodes, matching
// supcon_reference on values
fn supcon_on_tape(tape: &mut Tape, features: &[NodeId], labels: &[u8], tau: f64) -> Result<NodeId> {
    let b = features.len();
    if b < 2 {
        return tape.scalar_const(0.0);
    }
    let normed: Vec<NodeId> = features
        .iter()
        .map(|&f| tape.l2_normalize(f))
        .collect::<Result<_>>()?;
    let mut dots = vec![vec![None; b]; b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let prod = tape.mul(normed[i], normed[j])?;
            let s = tape.sum_all(prod)?;
            dots[i][j] = Some(tape.scale(s, 1.0 / tau)?);
        }
    }
    let mut anchor_terms = Vec::new();
    for i in 0..b {
        let positives: Vec<usize> = (0..b)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut den = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            let e = tape.exp(dots[i][j].unwrap())?;
            den = Some(match den {
                None => e,
                Some(d) => tape.add(d, e)?,
            });
        }
        let log_den = tape.log(den.unwrap())?;
        let mut inner = None;
        for &p in &positives {
            let term = tape.sub(dots[i][p].unwrap(), log_den)?;
            inner = Some(match inner {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        anchor_terms.push(tape.scale(inner.unwrap(), -1.0 / positives.len() as f64)?);
    }
    if anchor_terms.is_empty() {
        return tape.scalar_const(0.0);
    }
    let mut total = anchor_terms[0];
    for &t in &anchor_terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / anchor_terms.len() as f64)
}

/// Decoupled weight-decay adaptive-moment optimizer state.
pub struct AdamW {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let v = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { step: 0, m, v }
    }

    /// One update over all learnable parameters from their accumulated
    /// gradients; does not clear the gradients.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (idx, p) in store.iter_mut().enumerate() {
            if !p.learnable {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = p.value.data_mut();
            for k in 0..data.len() {
                let g = p.grad[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * data[k]);
            }
        }
    }
}

/// Scale all learnable gradients so their global L2 norm is at most
/// `max_norm`; returns the applied scale.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for p in store.iter_mut() {
        if p.learnable {
            for g in &mut p.grad {
                *g *= scale;
            }
        }
    }
    scale
}

/// Clamp the log-domain neuron constants so the recovered time constant
/// and threshold stay in their working ranges.
pub fn clamp_params(store: &mut ParamStore) {
    let tau_lo = (TAU_MIN / TAU_BASE).ln();
    let tau_hi = (TAU_MAX / TAU_BASE).ln();
    let vth_lo = VTH_MIN.ln();
    let vth_hi = VTH_MAX.ln();
    for p in store.iter_mut() {
        let (lo, hi) = if p.name.ends_with(".theta_tau") {
            (tau_lo, tau_hi)
        } else if p.name.ends_with(".theta_vth") {
            (vth_lo, vth_hi)
        } else {
            continue;
        };
        for x in p.value.data_mut() {
            *x = x.clamp(lo, hi);
        }
    }
}

/// Loss terms and counts for one batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct BatchEval {
    pub loss: f64,
    pub main: f64,
    pub aux: f64,
    pub supcon: f64,
    pub rate: f64,
    pub anom: f64,
    pub sbar: f64,
    pub hits: usize,
    pub count: usize,
    /// L2 norm of the auxiliary-head gradient this batch.
    pub aux_grad_norm: f64,
}

// forwards each clip on its own tape, joins features on a batch tape,
// and (optionally) backpropagates into the store
fn run_batch(
    net: &mut GateNet,
    batch: &[&ClipSample],
    cfg: &TrainConfig,
    accumulate: bool,
    context: (u32, usize),
) -> Result<BatchEval> {
    let mut passes: Vec<(Tape, ForwardOutput)> = Vec::with_capacity(batch.len());
    for sample in batch {
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &sample.pooled, sample.video.as_ref())?;
        passes.push((tape, out));
    }

    let has_video = net.config.video_dim > 0;
    let mut bt = Tape::new();
    let staged = bt.stage_all(&net.store);
    let [phi_w, phi_b] = net.phi_head_ids();
    let [aux_w, aux_b] = net.aux_head_ids();

    struct Leaves {
        z: NodeId,
        sdtb: Option<NodeId>,
        sbar: NodeId,
        trace_mean: Option<NodeId>,
    }
    let mut leaves = Vec::with_capacity(batch.len());
    let mut main_terms = Vec::new();
    let mut aux_terms = Vec::new();
    let mut rate_terms = Vec::new();
    let mut anom_terms = Vec::new();
    let mut hits = 0usize;
    let mut sbar_sum = 0.0;
    for (sample, (tape, out)) in batch.iter().zip(&passes) {
        let y = sample.label as f64;
        let target = y * (1.0 - cfg.label_smoothing) + 0.5 * cfg.label_smoothing;
        let z = bt.leaf(tape.value(out.f_final).clone(), true);
        let sdtb = if has_video {
            Some(bt.leaf(tape.value(out.f_sdtb).clone(), true))
        } else {
            None
        };
        let sbar = bt.leaf(tape.value(out.sbar).clone(), true);

        let main_lin = bt.linear_cm(staged[phi_w.index()], z, staged[phi_b.index()])?;
        let p_main = bt.sigmoid(main_lin)?;
        main_terms.push(bce_on_tape(&mut bt, p_main, target)?);
        let aux_in = sdtb.unwrap_or(z);
        let aux_lin = bt.linear_cm(staged[aux_w.index()], aux_in, staged[aux_b.index()])?;
        let p_aux = bt.sigmoid(aux_lin)?;
        aux_terms.push(bce_on_tape(&mut bt, p_aux, target)?);

        let dev = bt.add_scalar(sbar, -cfg.target_rate)?;
        rate_terms.push(bt.mul(dev, dev)?);

        let trace_mean = if cfg.lambda_anom > 0.0 {
            let a = bt.leaf(tape.value(out.trace_mean).clone(), true);
            let shifted = bt.add_scalar(a, -0.5)?;
            let p = bt.sigmoid(shifted)?;
            anom_terms.push(bce_on_tape(&mut bt, p, y)?);
            Some(a)
        } else {
            None
        };
        leaves.push(Leaves {
            z,
            sdtb,
            sbar,
            trace_mean,
        });

        let predicted_fake = bt.value(p_main).data()[0] > 0.5;
        if predicted_fake == (sample.label == 1) {
            hits += 1;
        }
        sbar_sum += out.gate.sbar;
    }

    let mean_of = |bt: &mut Tape, terms: &[NodeId]| -> Result<NodeId> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = bt.add(acc, t)?;
        }
        bt.scale(acc, 1.0 / terms.len() as f64)
    };
    let main_mean = mean_of(&mut bt, &main_terms)?;
    let aux_mean = mean_of(&mut bt, &aux_terms)?;
    let rate_mean_sq = mean_of(&mut bt, &rate_terms)?;
    let rate_term = bt.scale(rate_mean_sq, cfg.lambda_rate)?;
    let z_nodes: Vec<NodeId> = leaves.iter().map(|l| l.z).collect();
    let batch_labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
    let supcon_term = supcon_on_tape(&mut bt, &z_nodes, &batch_labels, cfg.tau_con)?;

    let aux_scaled = bt.scale(aux_mean, cfg.lambda_aux)?;
    let supcon_scaled = bt.scale(supcon_term, cfg.lambda_supcon)?;
    let mut total = bt.add(main_mean, aux_scaled)?;
    total = bt.add(total, supcon_scaled)?;
    total = bt.add(total, rate_term)?;
    let mut anom_value = 0.0;
    if !anom_terms.is_empty() {
        let anom_mean = mean_of(&mut bt, &anom_terms)?;
        anom_value = bt.value(anom_mean).data()[0];
        let anom_scaled = bt.scale(anom_mean, cfg.lambda_anom)?;
        total = bt.add(total, anom_scaled)?;
    }

    let mut eval = BatchEval {
        loss: bt.value(total).data()[0],
        main: bt.value(main_mean).data()[0],
        aux: bt.value(aux_mean).data()[0],
        supcon: bt.value(supcon_term).data()[0],
        rate: bt.value(rate_term).data()[0],
        anom: anom_value,
        sbar: sbar_sum / batch.len() as f64,
        hits,
        count: batch.len(),
        aux_grad_norm: 0.0,
    };
    if !eval.loss.is_finite() {
        return Err(SgError::non_finite_at(
            "train_step",
            format!(
                "epoch {} step {}: main {} aux {} supcon {} rate {} sbar {}",
                context.0, context.1, eval.main, eval.aux, eval.supcon, eval.rate, eval.sbar
            ),
        ));
    }
    if !accumulate {
        return Ok(eval);
    }

    bt.backward(total)?;
    bt.collect_grads(&mut net.store);
    let mut aux_sq = 0.0;
    for id in net.aux_head_ids() {
        aux_sq += net.store.get(id).grad.iter().map(|g| g * g).sum::<f64>();
    }
    eval.aux_grad_norm = aux_sq.sqrt();

    // push the feature cotangents back through each clip tape
    for (l, (mut tape, out)) in leaves.into_iter().zip(passes) {
        let mut seeds = Vec::with_capacity(4);
        let push = |node: NodeId, leaf: NodeId, seeds: &mut Vec<(NodeId, Vec<f64>)>| {
            if let Some(g) = bt.grad(leaf) {
                seeds.push((node, g.to_vec()));
            }
        };
        push(out.f_final, l.z, &mut seeds);
        if let Some(s) = l.sdtb {
            push(out.f_sdtb, s, &mut seeds);
        }
        push(out.sbar, l.sbar, &mut seeds);
        if let Some(a) = l.trace_mean {
            push(out.trace_mean, a, &mut seeds);
        }
        if !seeds.is_empty() {
            tape.backward_seeded(&seeds)?;
            tape.collect_grads(&mut net.store);
        }
    }
    Ok(eval)
}

/// One optimization step: batch losses, backprop, clip, update, clamp.
pub fn train_step(
    net: &mut GateNet,
    batch: &[&ClipSample],
    cfg: &TrainConfig,
    opt: &mut AdamW,
    context: (u32, usize),
) -> Result<BatchEval> {
    let eval = run_batch(net, batch, cfg, true, context)?;
    clip_grad_norm(&mut net.store, cfg.clip_norm);
    opt.step(&mut net.store, cfg);
    clamp_params(&mut net.store);
    net.store.zero_grads();
    Ok(eval)
}

/// Per-epoch training summary, one CSV row.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: u32,
    pub loss: f64,
    pub loss_main: f64,
    pub loss_aux: f64,
    pub loss_supcon: f64,
    pub loss_rate: f64,
    pub loss_anom: f64,
    pub sbar: f64,
    pub train_acc: f64,
    /// Largest per-step auxiliary-head gradient norm this epoch.
    pub aux_grad_norm: f64,
    /// True when the auxiliary head received no usable gradient all epoch.
    pub silent_sdtb: bool,
}

impl EpochStats {
    pub fn csv_header() -> &'static str {
        "epoch,loss,loss_main,loss_aux,loss_supcon,loss_rate,loss_anom,sbar,train_acc,aux_grad_norm,silent_sdtb"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss,
            self.loss_main,
            self.loss_aux,
            self.loss_supcon,
            self.loss_rate,
            self.loss_anom,
            self.sbar,
            self.train_acc,
            self.aux_grad_norm,
            self.silent_sdtb as u8
        )
    }
}

/// One pass over the dataset in shuffled batches.
pub fn train_epoch(
    net: &mut GateNet,
    samples: &[ClipSample],
    cfg: &TrainConfig,
    opt: &mut AdamW,
    epoch: u32,
) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(SgError::invalid("train_epoch", "empty dataset"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    order.shuffle(&mut rng);

    let mut sums = BatchEval::default();
    let mut aux_norm_max = 0.0f64;
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&ClipSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let eval = train_step(net, &batch, cfg, opt, (epoch, step))?;
        let w = eval.count as f64;
        sums.loss += eval.loss * w;
        sums.main += eval.main * w;
        sums.aux += eval.aux * w;
        sums.supcon += eval.supcon * w;
        sums.rate += eval.rate * w;
        sums.anom += eval.anom * w;
        sums.sbar += eval.sbar * w;
        sums.hits += eval.hits;
        sums.count += eval.count;
        aux_norm_max = aux_norm_max.max(eval.aux_grad_norm);
    }
    let n = sums.count as f64;
    Ok(EpochStats {
        epoch,
        loss: sums.loss / n,
        loss_main: sums.main / n,
        loss_aux: sums.aux / n,
        loss_supcon: sums.supcon / n,
        loss_rate: sums.rate / n,
        loss_anom: sums.anom / n,
        sbar: sums.sbar / n,
        train_acc: sums.hits as f64 / n,
        aux_grad_norm: aux_norm_max,
        silent_sdtb: aux_norm_max < SILENT_GRAD_NORM,
    })
}

/// One clip's evaluation scores.
#[derive(Clone, Copy, Debug)]
pub struct ClipScore {
    pub y: f64,
    pub y_aux: f64,
    pub label: u8,
}

/// Forward-only evaluation over a sample set.
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub scores: Vec<ClipScore>,
    /// Accuracy of the main head at threshold one half.
    pub acc: f64,
    /// Rank area under the curve of the main-head score.
    pub auc: f64,
    pub sbar: f64,
}

pub fn evaluate(net: &GateNet, samples: &[ClipSample]) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(SgError::invalid("evaluate", "empty dataset"));
    }
    let mut scores = Vec::with_capacity(samples.len());
    let mut sbar_sum = 0.0;
    for sample in samples {
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &sample.pooled, sample.video.as_ref())?;
        let (y, y_aux) = out.scores(&tape);
        scores.push(ClipScore {
            y,
            y_aux,
            label: sample.label,
        });
        sbar_sum += out.gate.sbar;
    }
    let hits = scores
        .iter()
        .filter(|s| (s.y > 0.5) == (s.label == 1))
        .count();
    let raw: Vec<f64> = scores.iter().map(|s| s.y).collect();
    let labels: Vec<bool> = scores.iter().map(|s| s.label == 1).collect();
    Ok(EvalResult {
        acc: hits as f64 / scores.len() as f64,
        auc: auc(&raw, &labels)?,
        sbar: sbar_sum / scores.len() as f64,
        scores,
    })
}

/// Full training history plus the rendered CSV log.
#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub epochs: Vec<EpochStats>,
    pub log_csv: String,
}

/// Train for the configured number of epochs. When `ckpt_path` is given the
/// checkpoint file is rewritten after every epoch, so the file always holds
/// the latest state and the final write is the converged model.
pub fn run_training(
    net: &mut GateNet,
    samples: &[ClipSample],
    cfg: &TrainConfig,
    config_json: serde_json::Value,
    ckpt_path: Option<&Path>,
) -> Result<TrainingRun> {
    cfg.validate()?;
    let mut opt = AdamW::new(&net.store);
    let mut log = String::from(EpochStats::csv_header());
    log.push('\n');
    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(net, samples, cfg, &mut opt, epoch)?;
        log.push_str(&stats.csv_row());
        log.push('\n');
        if let Some(path) = ckpt_path {
            let ckpt = Checkpoint {
                config: config_json.clone(),
                epoch,
                seed: cfg.seed,
                params: net.export_params(),
            };
            save_checkpoint(path, &ckpt)?;
        }
        epochs.push(stats);
    }
    Ok(TrainingRun { epochs, log_csv: log })
}
