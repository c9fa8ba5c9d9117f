//! Activation and loss primitives.

use crate::error::{Error, Result};

/// Floor applied before taking the log of a probability.
pub const LOG_EPS: f64 = 1e-12;

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax; `v` must be non-empty.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    v.iter_mut().for_each(|x| *x *= inv);
}

/// Backpropagates `grad_p` (dL/dp) through `p = softmax(a)`, returning dL/da.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - inner)).collect()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let (max, rest) = shifted_tail_sum(v);
    max + rest.ln_1p()
}

/// Returns the max entry and `Σ_{j ≠ argmax} exp(v_j − max)`, so that the
/// log-partition can be formed with `ln_1p` without cancellation.
fn shifted_tail_sum(v: &[f64]) -> (f64, f64) {
    let top = argmax(v);
    let max = v[top];
    let rest = v
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, x)| (x - max).exp())
        .sum();
    (max, rest)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let (max, rest) = shifted_tail_sum(logits);
    Ok((max - logits[label]) + rest.ln_1p())
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let loss = cross_entropy(logits, label)?;
    let mut grad = softmax(logits)?;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `D_KL(U ‖ p)` for the uniform distribution `U` over `p.len()` outcomes.
pub fn kl_from_uniform(p: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let k = p.len() as f64;
    let u = 1.0 / k;
    p.iter().map(|&pj| u * (u.ln() - pj.max(LOG_EPS).ln())).sum()
}

/// Gradient of [`kl_from_uniform`] with respect to `p`. Clamped entries get zero.
pub fn kl_from_uniform_grad(p: &[f64]) -> Vec<f64> {
    let u = 1.0 / p.len() as f64;
    p.iter()
        .map(|&pj| if pj > LOG_EPS { -u / pj } else { 0.0 })
        .collect()
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
