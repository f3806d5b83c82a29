//! Dense `f64` tensors with a reverse-mode gradient graph and a
//! central-difference gradient oracle.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Elementwise, Graph, NodeInfo, Var};
pub use tensor::Tensor;

use crate::error::{LabError, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Central-difference gradient of a scalar function:
/// `(f(p + eps·e_i) − f(p − eps·e_i)) / (2·eps)` for each element of `p`.
pub fn finite_diff_grad<F>(mut f: F, p: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(LabError::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut probe = p.clone();
    let mut grad = Vec::with_capacity(p.numel());
    for i in 0..p.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(LabError::Numeric(format!(
                "function evaluation at element {i} returned {plus} / {minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(p.shape().to_vec(), grad)
}

/// Denominator floor relative to the largest gradient entry of the tensor.
pub const GRAD_REL_FLOOR: f64 = 1e-3;
/// Absolute denominator floor, for tensors whose gradient is (numerically) zero.
pub const GRAD_ABS_FLOOR: f64 = 1e-6;

/// Worst elementwise relative error between two gradients.
///
/// Each element's error is `|a − b| / max(|a|, |b|, floor)` with
/// `floor = max(GRAD_REL_FLOOR · max_i max(|a_i|, |b_i|), GRAD_ABS_FLOOR)`, so
/// entries that are zero up to finite-difference noise cannot dominate.
pub fn grad_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    if analytic.shape() != numeric.shape() {
        return f64::INFINITY;
    }
    let scale = analytic.max_abs().max(numeric.max_abs());
    let floor = (GRAD_REL_FLOOR * scale).max(GRAD_ABS_FLOOR);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
