//! Reconstruction, discriminator and adversarial losses.
//!
//! Public functions take batch-major tensors (`[N, ...]` images, `[N, n]`
//! probabilities, row-major `N × n` label bits). The `*_grad` helpers work on
//! the attribute-major `[n, N]` layout the discriminator produces.

use crate::error::{FaderError, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Squared L2 error summed over every pixel and channel of an example, averaged over the batch.
pub fn reconstruction_loss<T: Real>(reconstruction: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if reconstruction.shape() != target.shape() || target.shape().is_empty() {
        return Err(FaderError::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            reconstruction.shape(),
            target.shape()
        )));
    }
    Ok(reconstruction_loss_raw(reconstruction.data(), target.data(), target.shape()[0]))
}

pub(crate) fn reconstruction_loss_raw<T: Real>(recon: &[T], target: &[T], batch: usize) -> f64 {
    let sum: f64 = recon
        .iter()
        .zip(target)
        .map(|(&r, &t)| {
            let d = (r - t).to_f64().unwrap();
            d * d
        })
        .sum();
    sum / batch as f64
}

/// Gradient of [`reconstruction_loss`] w.r.t. the reconstruction.
pub(crate) fn reconstruction_grad<T: Real>(recon: &[T], target: &[T], batch: usize) -> Vec<T> {
    let k = T::lit(2.0 / batch as f64);
    recon.iter().zip(target).map(|(&r, &t)| k * (r - t)).collect()
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c != p)
}

/// Mean over the batch of `-Σ_k [t_k log p_k + (1 - t_k) log(1 - p_k)]`, plus the
/// gradient w.r.t. the pre-sigmoid logits. `probs` is `[n, N]`, `targets` is `N × n`.
pub(crate) fn bce_with_grad<T: Real>(probs: &[T], targets: &[f64], n_attr: usize, batch: usize) -> (f64, Vec<T>) {
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); probs.len()];
    for a in 0..n_attr {
        for b in 0..batch {
            let p = probs[a * batch + b].to_f64().unwrap();
            let t = targets[b * n_attr + a];
            let (pc, clamped) = clamp_prob(p);
            loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
            if !clamped {
                grad[a * batch + b] = T::lit((p - t) / batch as f64);
            }
        }
    }
    (loss / batch as f64, grad)
}

fn check_probs<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<(usize, usize)> {
    let &[batch, n] = probs.shape() else {
        return Err(FaderError::Shape(format!("probabilities must be [N, n], got {:?}", probs.shape())));
    };
    if labels.len() != batch * n {
        return Err(FaderError::Shape(format!("{} labels for {batch}x{n} probabilities", labels.len())));
    }
    Ok((batch, n))
}

fn to_attr_major<T: Real>(probs: &Tensor<T>, batch: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * n];
    for b in 0..batch {
        for a in 0..n {
            out[a * batch + b] = probs.data()[b * n + a];
        }
    }
    out
}

/// Negative log-likelihood of the true labels under the discriminator, averaged over the batch.
pub fn discriminator_loss<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    let (batch, n) = check_probs(probs, labels)?;
    let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    Ok(bce_with_grad(&to_attr_major(probs, batch, n), &targets, n, batch).0)
}

/// Negative log-likelihood of the flipped labels `1 - y`, averaged over the batch.
pub fn adversarial_term<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    let (batch, n) = check_probs(probs, labels)?;
    let targets = flipped_targets(labels);
    Ok(bce_with_grad(&to_attr_major(probs, batch, n), &targets, n, batch).0)
}

pub(crate) fn flipped_targets(labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|&y| 1.0 - f64::from(y)).collect()
}

/// Encoder-decoder objective: reconstruction plus `λ_E` times the flipped-label NLL.
pub fn encdec_loss<T: Real>(
    reconstruction: &Tensor<T>,
    target: &Tensor<T>,
    probs: &Tensor<T>,
    labels: &[u8],
    lambda: f64,
) -> Result<f64> {
    let recon = reconstruction_loss(reconstruction, target)?;
    if lambda == 0.0 {
        check_probs(probs, labels)?;
        return Ok(recon);
    }
    Ok(recon + lambda * adversarial_term(probs, labels)?)
}

/// Fraction of `(sample, attribute)` entries where `p > 1/2` matches the label.
pub(crate) fn accuracy<T: Real>(probs: &[T], labels: &[u8], n_attr: usize, batch: usize) -> f64 {
    let half = T::lit(0.5);
    let mut hits = 0usize;
    for a in 0..n_attr {
        for b in 0..batch {
            let pred = u8::from(probs[a * batch + b] > half);
            hits += usize::from(pred == labels[b * n_attr + a]);
        }
    }
    hits as f64 / (n_attr * batch).max(1) as f64
}

/// `λ_E` after `step` updates: a linear ramp from 0 to `lambda_max` over `warmup_steps`, then flat.
pub fn lambda_schedule(step: u64, warmup_steps: u64, lambda_max: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        return lambda_max;
    }
    lambda_max * (step as f64 / warmup_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reconstruction_values() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.3f64, -0.2, 0.0, 0.5]).unwrap();
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        let y = Tensor::from_vec(&[1, 1, 2, 2], x.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert_abs_diff_eq!(reconstruction_loss(&y, &x).unwrap(), 0.04, epsilon = 1e-12);
        // per-example sums 0.04 and 0.12
        let a = Tensor::from_vec(&[2, 1, 1, 4], vec![0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.0]).unwrap();
        let z = Tensor::zeros(&[2, 1, 1, 4]);
        assert_abs_diff_eq!(reconstruction_loss(&a, &z).unwrap(), 0.08, epsilon = 1e-12);
        assert!(reconstruction_loss(&a, &x).is_err());
    }

    #[test]
    fn clamping_keeps_losses_finite() {
        let p = Tensor::from_vec(&[1, 1], vec![0.0f64]).unwrap();
        let l = discriminator_loss(&p, &[1]).unwrap();
        assert_abs_diff_eq!(l, -(PROB_EPS.ln()), epsilon = 1e-9);
        let p1 = Tensor::from_vec(&[1, 1], vec![1.0f64]).unwrap();
        assert!(discriminator_loss(&p1, &[1]).unwrap() < 1e-6);
    }

    #[test]
    fn label_count_mismatch() {
        let p = Tensor::from_vec(&[1, 2], vec![0.5f64, 0.5]).unwrap();
        assert!(discriminator_loss(&p, &[1]).is_err());
    }

    #[test]
    fn schedule_is_linear_then_flat() {
        assert_eq!(lambda_schedule(0, 10, 1.0), 0.0);
        assert_eq!(lambda_schedule(5, 10, 1.0), 0.5);
        assert_eq!(lambda_schedule(10, 10, 1.0), 1.0);
        assert_eq!(lambda_schedule(99, 10, 1.0), 1.0);
        assert_eq!(lambda_schedule(0, 0, 0.3), 0.3);
    }
}
