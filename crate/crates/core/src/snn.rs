//! Leaky integrate-and-fire neurons with multi-level firing.
//!
//! A neuron integrates v_t = (1 - 1/tau) v_{t-1} + x_t and emits an integer
//! spike count s_t in 0..=L derived from v_t / vth. The count is
//! non-differentiable, so the backward pass uses a sum of arctan-derivative
//! bumps centered between integer levels:
//!
//!   S(u) = [0 < u < L] * sum_k (a/2) / (1 + (pi (u - k - 1/2) a / 2)^2)
//!
//! with u = v / vth. Membrane time constant and threshold are learnable
//! through log-parameters: tau = clamp(2 e^t, 0.5, 20), vth = clamp(e^w,
//! 0.05, 10), so positivity holds by construction.

use crate::diffcore::{NodeId, ParamId, ParamStore, SpikeMode, Tape, Tensor, VthRef};
use crate::error::Result;
use serde::{Deserialize, Serialize};

pub const DEFAULT_LEVELS: u32 = 4;
pub const DEFAULT_ALPHA: f64 = 2.0;
pub const TAU_BASE: f64 = 2.0;
pub const TAU_MIN: f64 = 0.5;
pub const TAU_MAX: f64 = 20.0;
pub const VTH_BASE: f64 = 1.0;
pub const VTH_MIN: f64 = 0.05;
pub const VTH_MAX: f64 = 10.0;

/// Serializable mirror of the neuron constants, so run configs record the
/// exact firing levels, surrogate width, and clamp ranges in effect.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnnConfig {
    pub levels: u32,
    pub alpha: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub vth_min: f64,
    pub vth_max: f64,
}

impl Default for SnnConfig {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS,
            alpha: DEFAULT_ALPHA,
            tau_min: TAU_MIN,
            tau_max: TAU_MAX,
            vth_min: VTH_MIN,
            vth_max: VTH_MAX,
        }
    }
}

/// Plain multi-level firing count for one membrane value.
pub fn multispike(v: f64, vth: f64, mode: SpikeMode, levels: u32) -> f64 {
    let u = (v / vth).clamp(0.0, levels as f64);
    match mode {
        SpikeMode::Round => (u + 0.5).floor(),
        SpikeMode::Crossings => u.floor(),
    }
}

/// One bump of the surrogate: the arctan derivative centered at k + 1/2.
pub fn surrogate_term(u: f64, alpha: f64, k: u32) -> f64 {
    let c = u - k as f64 - 0.5;
    let z = std::f64::consts::PI * c * alpha / 2.0;
    (alpha / 2.0) / (1.0 + z * z)
}

/// Surrogate derivative of the firing count with respect to u = v / vth.
/// Zero outside the open interval (0, levels).
pub fn surrogate_sum(u: f64, alpha: f64, levels: u32) -> f64 {
    if u <= 0.0 || u >= levels as f64 {
        return 0.0;
    }
    (0..levels).map(|k| surrogate_term(u, alpha, k)).sum()
}

/// Membrane reset applied after firing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResetKind {
    /// v <- v - s * vth, with the count detached so reset carries no gradient.
    Subtract,
    /// v <- 0 wherever the neuron fired (constant keep-mask).
    Zero,
}

/// Learnable neuron constants: log-parameters for tau and vth.
#[derive(Clone, Copy, Debug)]
pub struct LifCell {
    pub theta_tau: ParamId,
    pub theta_vth: ParamId,
}

impl LifCell {
    /// Register both log-parameters at zero, giving tau = 2 and vth = 1.
    pub fn register(store: &mut ParamStore, prefix: &str) -> Self {
        let theta_tau = store.add(format!("{prefix}.theta_tau"), Tensor::zeros(vec![1]), true);
        let theta_vth = store.add(format!("{prefix}.theta_vth"), Tensor::zeros(vec![1]), true);
        Self { theta_tau, theta_vth }
    }

    /// Recover (leak, vth) nodes on the tape from the staged log-parameters.
    /// leak = 1 - 1/tau; both values pass through their clamp windows so the
    /// recovered constants stay in range whatever the optimizer does.
    pub fn constants(&self, tape: &mut Tape, staged: &[NodeId]) -> Result<(NodeId, NodeId)> {
        let t_tau = staged[self.theta_tau.index()];
        let t_vth = staged[self.theta_vth.index()];
        let tau_raw = tape.exp(t_tau)?;
        let tau_scaled = tape.scale(tau_raw, TAU_BASE)?;
        let tau = tape.clamp(tau_scaled, TAU_MIN, TAU_MAX)?;
        let inv_tau = tape.recip(tau)?;
        let neg = tape.scale(inv_tau, -1.0)?;
        let leak = tape.add_scalar(neg, 1.0)?;
        let vth_raw = tape.exp(t_vth)?;
        let vth_scaled = tape.scale(vth_raw, VTH_BASE)?;
        let vth = tape.clamp(vth_scaled, VTH_MIN, VTH_MAX)?;
        Ok((leak, vth))
    }

    /// Plain (tau, vth) values from the current parameter store.
    pub fn values(&self, store: &ParamStore) -> (f64, f64) {
        let tt = store.get(self.theta_tau).value.data()[0];
        let tv = store.get(self.theta_vth).value.data()[0];
        (
            (TAU_BASE * tt.exp()).clamp(TAU_MIN, TAU_MAX),
            (VTH_BASE * tv.exp()).clamp(VTH_MIN, VTH_MAX),
        )
    }
}

/// Spike trains and final membrane state of a neuron group over time.
pub struct LifOutput {
    pub spikes: Vec<NodeId>,
    pub final_potential: NodeId,
}

/// Run a LIF group over a timestep sequence on the tape.
///
/// Every `inputs[t]` must share one shape; the whole group shares one (tau,
/// vth) pair. Firing uses whole-threshold crossings, so a membrane just
/// under vth stays silent.
pub fn lif_sequence(
    tape: &mut Tape,
    staged: &[NodeId],
    cell: &LifCell,
    inputs: &[NodeId],
    reset: ResetKind,
) -> Result<LifOutput> {
    let (leak, vth) = cell.constants(tape, staged)?;
    lif_sequence_with(tape, leak, vth, inputs, reset)
}

/// LIF recurrence with explicit (leak, vth) nodes.
pub fn lif_sequence_with(
    tape: &mut Tape,
    leak: NodeId,
    vth: NodeId,
    inputs: &[NodeId],
    reset: ResetKind,
) -> Result<LifOutput> {
    if inputs.is_empty() {
        return Err(crate::error::SgError::invalid("lif_sequence", "no timesteps"));
    }
    let shape = tape.value(inputs[0]).shape().to_vec();
    let mut v = tape.constant(Tensor::zeros(shape.clone()));
    let mut spikes = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let decayed = tape.scale_by(v, leak)?;
        v = tape.add(decayed, x)?;
        let s = tape.spike(
            v,
            VthRef::Node(vth),
            SpikeMode::Crossings,
            DEFAULT_ALPHA,
            DEFAULT_LEVELS,
        )?;
        v = match reset {
            ResetKind::Subtract => {
                let s_stop = tape.detach(s)?;
                let drop = tape.scale_by(s_stop, vth)?;
                tape.sub(v, drop)?
            }
            ResetKind::Zero => {
                let keep: Vec<f64> = tape
                    .value(s)
                    .data()
                    .iter()
                    .map(|&c| if c > 0.0 { 0.0 } else { 1.0 })
                    .collect();
                let mask = tape.constant(Tensor::new(shape.clone(), keep)?);
                tape.mul(v, mask)?
            }
        };
        spikes.push(s);
    }
    Ok(LifOutput {
        spikes,
        final_potential: v,
    })
}

/// Plain scalar LIF oracle: spike counts per step and the final membrane.
pub fn lif_trace_plain(
    inputs: &[f64],
    tau: f64,
    vth: f64,
    levels: u32,
) -> (Vec<f64>, f64) {
    let leak = 1.0 - 1.0 / tau;
    let mut v = 0.0;
    let mut spikes = Vec::with_capacity(inputs.len());
    for &x in inputs {
        v = leak * v + x;
        let s = multispike(v, vth, SpikeMode::Crossings, levels);
        v -= s * vth;
        spikes.push(s);
    }
    (spikes, v)
}
