//! Dense-operation counts and energy estimates for the spiking pathway.
//!
//! Counts cover multiply-accumulates in convolution, linear, and attention
//! stages only; elementwise work (affines, sigmoids, resets, residual adds)
//! is excluded on both sides of the comparison. The spiking estimate scales
//! the dense count by the measured firing rate and prices each synaptic
//! operation at an accumulate; the non-spiking reference prices the same
//! architecture with quadratic token attention at full multiply-accumulate
//! cost.

use serde::{Deserialize, Serialize};

use crate::gatenet::{GateNetConfig, GateOutput};

/// Energy per multiply-accumulate, picojoules (45 nm figures).
pub const E_MAC_PJ: f64 = 4.6;
/// Energy per synaptic accumulate, picojoules.
pub const E_SOP_PJ: f64 = 0.9;
/// Frozen video-encoder cost per clip, reported for context only.
pub const BACKBONE_MACS: u64 = 281_200_000_000;

/// Which arithmetic model to count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpsMode {
    /// Spike-driven: linear attention, separable conv with expansion.
    Snn,
    /// Dense reference: quadratic token attention, plain separable conv.
    Ann,
}

/// One named stage and its multiply-accumulate count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageOps {
    pub stage: String,
    pub macs: u64,
}

/// Per-stage counts; `total` is their sum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OpsBreakdown {
    pub stages: Vec<StageOps>,
    pub total: u64,
}

/// Mean firing statistics over a set of forward passes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiringRate {
    /// Mean spike count per site element, normalized by the level count.
    pub sbar: f64,
    /// Mean fraction of gate cells above one half.
    pub gate_over_half: f64,
}

/// Energy summary for one configuration at a measured firing rate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyReport {
    pub dense_macs_snn: u64,
    pub dense_macs_ann: u64,
    pub sbar: f64,
    /// Synaptic operations: dense spiking count scaled by the rate.
    pub sops: f64,
    pub energy_snn_mj: f64,
    pub energy_ann_mj: f64,
    /// Spiking-over-dense advantage; absent when the network is silent.
    pub ratio: Option<f64>,
    pub backbone_macs: u64,
    pub backbone_energy_mj: f64,
}

/// Count dense multiply-accumulates per clip for one forward pass.
pub fn count_dense_ops(config: &GateNetConfig, mode: OpsMode) -> OpsBreakdown {
    let d = config.d as u64;
    let d_c = config.d_c as u64;
    let c = config.channels as u64;
    let g2 = (config.grid * config.grid) as u64;
    let t = config.frames as u64;
    let n = t * g2;
    let d_h = config.head_dim() as u64;
    let hidden = config.mlp_hidden() as u64;

    let mut stages = Vec::new();
    // 3x3 stem per channel per frame: d_c maps over the grid
    stages.push(StageOps {
        stage: "stems".into(),
        macs: c * d_c * 9 * g2 * t,
    });
    stages.push(StageOps {
        stage: "fusion".into(),
        macs: n * (c * d_c) * d,
    });
    for i in 0..config.depth {
        let (sep, attn) = match mode {
            OpsMode::Snn => {
                // pw d->2d, dw 3x3 at 2d, pw 2d->d
                let sep = n * (4 * d * d + 18 * d);
                // q/k/v, linear d_h x d_h core per head, output proj
                let attn = 3 * n * d * d + 2 * n * d * d_h + n * d * d;
                (sep, attn)
            }
            OpsMode::Ann => {
                // dw 3x3 at d, pw d->d
                let sep = n * (9 * d + d * d);
                // q/k/v/out plus the token-quadratic core
                let attn = 4 * n * d * d + 2 * n * n * d;
                (sep, attn)
            }
        };
        let mlp = 2 * n * d * hidden;
        stages.push(StageOps {
            stage: format!("block{}.sep", i),
            macs: sep,
        });
        stages.push(StageOps {
            stage: format!("block{}.attn", i),
            macs: attn,
        });
        stages.push(StageOps {
            stage: format!("block{}.mlp", i),
            macs: mlp,
        });
    }
    stages.push(StageOps {
        stage: "gate".into(),
        macs: n * d,
    });

    let total = stages.iter().map(|s| s.macs).sum();
    OpsBreakdown { stages, total }
}

/// Mean firing statistics over forward outputs.
pub fn measure_firing_rate(outputs: &[GateOutput]) -> FiringRate {
    if outputs.is_empty() {
        return FiringRate {
            sbar: 0.0,
            gate_over_half: 0.0,
        };
    }
    let n = outputs.len() as f64;
    FiringRate {
        sbar: outputs.iter().map(|o| o.sbar).sum::<f64>() / n,
        gate_over_half: outputs.iter().map(|o| o.gate_over_half).sum::<f64>() / n,
    }
}

/// Synaptic operations to millijoules at the accumulate price.
pub fn sops_to_mj(sops: f64) -> f64 {
    sops * E_SOP_PJ * 1e-9
}

/// Multiply-accumulates to millijoules at the full price.
pub fn macs_to_mj(macs: f64) -> f64 {
    macs * E_MAC_PJ * 1e-9
}

/// Full energy comparison for a configuration at firing rate `sbar`.
pub fn energy_report(config: &GateNetConfig, sbar: f64) -> EnergyReport {
    let snn = count_dense_ops(config, OpsMode::Snn).total;
    let ann = count_dense_ops(config, OpsMode::Ann).total;
    let sops = snn as f64 * sbar;
    let energy_snn_mj = sops_to_mj(sops);
    let energy_ann_mj = macs_to_mj(ann as f64);
    let ratio = if energy_snn_mj > 0.0 {
        Some(energy_ann_mj / energy_snn_mj)
    } else {
        None
    };
    EnergyReport {
        dense_macs_snn: snn,
        dense_macs_ann: ann,
        sbar,
        sops,
        energy_snn_mj,
        energy_ann_mj,
        ratio,
        backbone_macs: BACKBONE_MACS,
        backbone_energy_mj: macs_to_mj(BACKBONE_MACS as f64),
    }
}

/// Per-stage counts as a two-column CSV with a trailing total row.
pub fn ops_csv(breakdown: &OpsBreakdown) -> String {
    let mut out = String::from("stage,macs\n");
    for s in &breakdown.stages {
        out.push_str(&format!("{},{}\n", s.stage, s.macs));
    }
    out.push_str(&format!("total,{}\n", breakdown.total));
    out
}
