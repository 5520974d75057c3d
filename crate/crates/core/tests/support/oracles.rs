//! Hand-evaluated loss and schedule values.

use fader_core::losses::{discriminator_loss, encdec_loss, lambda_schedule, reconstruction_loss};
use fader_core::Tensor;

pub const LOSS_TOL: f64 = 1e-9;

/// `(description, computed, expected)` for every loss oracle.
pub fn loss_cases() -> Vec<(&'static str, f64, f64)> {
    let ln2 = std::f64::consts::LN_2;
    let p = |v: &[f64], n: usize| Tensor::from_vec(&[v.len() / n, n], v.to_vec()).unwrap();
    let img = |v: Vec<f64>, b: usize| Tensor::from_vec(&[b, 1, 2, 2], v).unwrap();

    let zero = img(vec![0.0; 4], 1);
    let off = img(vec![0.1; 4], 1);
    // per-example sums 0.04 and 0.12
    let two = img(vec![0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.3], 2);
    let half = p(&[0.5], 1);
    vec![
        ("dis n=1 p=0.5 y=1", discriminator_loss(&half, &[1]).unwrap(), ln2),
        ("dis n=2 p=(0.5,0.5) y=(1,0)", discriminator_loss(&p(&[0.5, 0.5], 2), &[1, 0]).unwrap(), 2.0 * ln2),
        ("dis perfect", discriminator_loss(&p(&[1.0], 1), &[1]).unwrap(), -(1.0f64 - 1e-7).ln()),
        ("recon identity", reconstruction_loss(&off, &off).unwrap(), 0.0),
        ("recon 2x2 delta 0.1", reconstruction_loss(&off, &zero).unwrap(), 4.0 * 0.1 * 0.1),
        (
            "recon batch mean",
            reconstruction_loss(&two, &img(vec![0.0; 8], 2)).unwrap(),
            (4.0 * 0.01 + (3.0 * 0.01 + 0.09)) / 2.0,
        ),
        ("encdec lambda 0", encdec_loss(&off, &zero, &half, &[1], 0.0).unwrap(), 0.04),
        ("encdec lambda 1e-4", encdec_loss(&zero, &zero, &half, &[1], 1e-4).unwrap(), 1e-4 * ln2),
        (
            "encdec fooled",
            encdec_loss(&zero, &zero, &p(&[0.0], 1), &[1], 0.5).unwrap(),
            -0.5 * (1.0f64 - 1e-7).ln(),
        ),
    ]
}

/// `(step, warmup, λ_max, expected)` including the published schedule endpoints.
pub fn schedule_cases() -> Vec<(u64, u64, f64, f64)> {
    vec![
        (0, 500_000, 1e-4, 0.0),
        (250_000, 500_000, 1e-4, 5e-5),
        (500_000, 500_000, 1e-4, 1e-4),
        (1_000_000, 500_000, 1e-4, 1e-4),
        (0, 6_000, 0.3, 0.0),
        (1_500, 6_000, 0.3, 0.075),
        (3_000, 6_000, 0.3, 0.15),
        (6_000, 6_000, 0.3, 0.3),
        (29_999, 6_000, 0.3, 0.3),
        (0, 0, 0.2, 0.2),
    ]
}

pub fn schedule_value(step: u64, warmup: u64, lambda_max: f64) -> f64 {
    lambda_schedule(step, warmup, lambda_max)
}
