#[path = "support/oracles.rs"]
mod oracles;

use fader_core::losses::{adversarial_term, lambda_schedule};
use fader_core::{Tensor, TrainConfig};
use proptest::prelude::*;

#[test]
fn losses_match_hand_values() {
    for (what, got, want) in oracles::loss_cases() {
        assert!((got - want).abs() <= oracles::LOSS_TOL, "{what}: {got} vs {want}");
    }
}

#[test]
fn schedule_hits_endpoints_exactly() {
    for (step, warmup, max, want) in oracles::schedule_cases() {
        assert_eq!(oracles::schedule_value(step, warmup, max), want, "step {step} warmup {warmup}");
    }
    let p = TrainConfig::published_schedule();
    assert_eq!(p.lambda_at(500_000), 1e-4);
    assert_eq!(p.lambda_at(250_000), 5e-5);
}

#[test]
fn shape_mismatches_are_errors() {
    let a = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let b = Tensor::<f64>::zeros(&[1, 1, 2, 3]);
    assert!(fader_core::losses::reconstruction_loss(&a, &b).is_err());
    let p = Tensor::<f64>::filled(&[2, 1], 0.5);
    assert!(adversarial_term(&p, &[1]).is_err());
}

proptest! {
    #[test]
    fn schedule_is_piecewise_linear(warmup in 1u64..100_000, max in 0.0f64..10.0, a in 0u64..200_000, b in 0u64..200_000) {
        let f = |s| lambda_schedule(s, warmup, max);
        prop_assert!(f(0) == 0.0);
        prop_assert!(f(warmup) == max);
        prop_assert!(f(warmup + a) == max);
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(f(lo) <= f(hi));
        // linear before the knee
        if hi <= warmup {
            let want = max * hi as f64 / warmup as f64;
            prop_assert!((f(hi) - want).abs() <= 1e-12 * max.max(1.0));
        }
        // continuity across the knee
        prop_assert!((f(warmup - 1) - max).abs() <= max / warmup as f64 + 1e-12);
    }

    #[test]
    fn flipped_term_mirrors_the_discriminator_loss(p in 0.001f64..0.999, y in 0u8..2) {
        let probs = Tensor::from_vec(&[1, 1], vec![p]).unwrap();
        let adv = adversarial_term(&probs, &[y]).unwrap();
        let want = if y == 1 { -(1.0 - p).ln() } else { -p.ln() };
        prop_assert!((adv - want).abs() < 1e-12);
    }
}
