//! Central-difference gradient checking.
//!
//! Rebuilds the forward pass at perturbed inputs and compares the analytic
//! gradient against (f(x+h) - f(x-h)) / 2h per coordinate. Used by op tests;
//! not part of the training path.

use crate::error::Result;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Max relative disagreement between analytic and central-difference
/// gradients of a scalar-valued function at `point`.
///
/// `build` must construct the same computation for every call; the input
/// leaf is the only thing that changes between evaluations.
pub fn finite_difference_check(
    point: &Tensor,
    h: f64,
    build: impl Fn(&mut Tape, NodeId) -> Result<NodeId>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let loss = build(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let leaf = t.leaf(Tensor::new(point.shape().to_vec(), data)?, false);
        let l = build(&mut t, leaf)?;
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()) + 1e-8;
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    Ok(worst)
}
