//! Numerical substrate: tensors, reverse-mode gradients, the optimizer,
//! and the scalar loss kernels shared by every stage of the pipeline.

pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{AdamConfig, OptimState};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{log_sum_exp, softmax_f64, Tensor};

use crate::error::{Error, Result};

/// Cross entropy of `logits` against `target_index`, with the gradient
/// w.r.t. the logits (softmax minus one-hot). Log-sum-exp is computed with
/// max subtraction so saturated logits do not overflow.
pub fn softmax_cross_entropy(logits: &[f32], target_index: usize) -> (f64, Vec<f32>) {
    assert!(target_index < logits.len(), "target index out of range");
    let lse = log_sum_exp(logits);
    let loss = lse - logits[target_index] as f64;
    let grad = logits
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let p = ((v as f64) - lse).exp();
            (p - if j == target_index { 1.0 } else { 0.0 }) as f32
        })
        .collect();
    (loss, grad)
}

/// D_KL(softmax(p_logits) || softmax(q_logits)), computed in log space.
pub fn kl_divergence(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    assert_eq!(p_logits.len(), q_logits.len(), "kl_divergence length mismatch");
    let lse_p = log_sum_exp(p_logits);
    let lse_q = log_sum_exp(q_logits);
    let mut kl = 0.0f64;
    for (&pl, &ql) in p_logits.iter().zip(q_logits) {
        let log_p = pl as f64 - lse_p;
        let p = log_p.exp();
        let log_q = ql as f64 - lse_q;
        kl += p * (log_p - log_q);
    }
    kl
}

/// Central-difference gradient check.
///
/// `value_fn` evaluates the scalar function at an arbitrary point;
/// `analytic` is the gradient under test at `point`. Only the listed
/// `coords` are probed. Returns the max over coordinates of
/// `|analytic - central difference| / max(1, |analytic|)`.
///
/// The difference quotient divides by the actually representable f32 step
/// `fl(x+eps) - fl(x-eps)` rather than `2*eps`.
pub fn grad_check<F>(
    mut value_fn: F,
    analytic: &[f32],
    point: &[f32],
    epsilon: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f32]) -> Result<f64>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    assert_eq!(analytic.len(), point.len());
    let mut worst = 0.0f64;
    let mut buf = point.to_vec();
    for &c in coords {
        let x = point[c];
        let xp = (x as f64 + epsilon) as f32;
        let xm = (x as f64 - epsilon) as f32;
        buf[c] = xp;
        let fp = value_fn(&buf)?;
        buf[c] = xm;
        let fm = value_fn(&buf)?;
        buf[c] = x;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Eval(format!(
                "non-finite function value while probing coordinate {}",
                c
            )));
        }
        let fd = (fp - fm) / (xp as f64 - xm as f64);
        let ana = analytic[c] as f64;
        let err = (ana - fd).abs() / ana.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
