//! Central finite differences over every parameter of a tiny f64 model.
//! Shared by the gradient tests and the acceptance report.

use fader_core::params::ParamStore;
use fader_core::training::{discriminator_gradients, encdec_gradients};
use fader_core::{FaderModel, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
const BATCH: usize = 4;

pub fn tiny(dropout_rate: f64) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 3,
        n_attributes: 1,
        n_layers: 2,
        base_filters: 2,
        dis_hidden: 6,
        dropout_rate,
        ..ModelConfig::default()
    }
}

pub fn inputs(seed: u64) -> (Tensor<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..BATCH * 3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    // both classes present so the discriminator loss is not trivially one-sided
    let labels = (0..BATCH).map(|i| (i % 2) as u8).collect();
    (Tensor::from_vec(&[BATCH, 3, 8, 8], data).unwrap(), labels)
}

#[derive(Clone, Copy, Debug)]
pub enum Group {
    Encoder,
    Decoder,
    Discriminator,
}

fn store_mut(m: &mut FaderModel<f64>, g: Group) -> &mut ParamStore<f64> {
    match g {
        Group::Encoder => &mut m.encoder.params,
        Group::Decoder => &mut m.decoder.params,
        Group::Discriminator => &mut m.discriminator.params,
    }
}

/// Central differences of `f` for every coordinate of every tensor in `group`.
pub fn numeric(model: &FaderModel<f64>, group: Group, f: &dyn Fn(&FaderModel<f64>) -> f64) -> Vec<Vec<f64>> {
    let mut m = model.clone();
    let n_tensors = store_mut(&mut m, group).len();
    (0..n_tensors)
        .map(|t| {
            let len = store_mut(&mut m, group).tensors()[t].len();
            (0..len)
                .map(|j| {
                    let orig = store_mut(&mut m, group).tensors()[t].data()[j];
                    store_mut(&mut m, group).tensors_mut()[t].data_mut()[j] = orig + H;
                    let up = f(&m);
                    store_mut(&mut m, group).tensors_mut()[t].data_mut()[j] = orig - H;
                    let down = f(&m);
                    store_mut(&mut m, group).tensors_mut()[t].data_mut()[j] = orig;
                    (up - down) / (2.0 * H)
                })
                .collect()
        })
        .collect()
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` per tensor; 0 when both vanish and agree to 1e-8.
pub fn relative_errors(label: &str, analytic: &ParamStore<f64>, numeric: &[Vec<f64>]) -> Vec<(String, f64)> {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|((name, a), n)| {
            let diff = norm(a.data().iter().zip(n).map(|(x, y)| x - y));
            let scale = norm(a.data().iter().copied()).max(norm(n.iter().copied()));
            let rel = if scale < 1e-10 {
                if diff < 1e-8 { 0.0 } else { f64::INFINITY }
            } else {
                diff / scale
            };
            (format!("{label} {name}"), rel)
        })
        .collect()
}

/// Relative error of every tensor for the discriminator objective, the full
/// encoder-decoder objective at `lambda`, and the reconstruction term alone.
pub fn gradient_errors(seed: u64, dropout_rate: f64, lambda: f64) -> Vec<(String, f64)> {
    let model = FaderModel::<f64>::init(&tiny(dropout_rate), seed).unwrap();
    let (x, y) = inputs(seed ^ 0x5eed);
    // a cloned stream replays the same dropout masks on every evaluation
    let masks = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    let dis = |m: &FaderModel<f64>| discriminator_gradients(m, &x, &y, Some(&mut masks.clone())).unwrap();
    let ed = |m: &FaderModel<f64>, lam: f64| encdec_gradients(m, &x, &y, lam, Some(&mut masks.clone())).unwrap();

    let mut out = Vec::new();
    let g = dis(&model).grads;
    out.extend(relative_errors("dis", &g, &numeric(&model, Group::Discriminator, &|m| dis(m).loss)));

    let g = ed(&model, lambda);
    for (group, analytic) in [(Group::Encoder, &g.encoder), (Group::Decoder, &g.decoder)] {
        let n = numeric(&model, group, &|m| ed(m, lambda).loss);
        out.extend(relative_errors(&format!("encdec {group:?}"), analytic, &n));
    }

    let g = ed(&model, 0.0);
    for (group, analytic) in [(Group::Encoder, &g.encoder), (Group::Decoder, &g.decoder)] {
        let n = numeric(&model, group, &|m| ed(m, 0.0).recon_loss);
        out.extend(relative_errors(&format!("recon {group:?}"), analytic, &n));
    }
    out
}

/// Finite-difference vs analytic adversarial-term gradient on one encoder weight.
pub fn adversarial_encoder_gradient(seed: u64) -> (f64, f64) {
    let model = FaderModel::<f64>::init(&tiny(0.0), seed).unwrap();
    let (x, y) = inputs(seed + 1);
    let with = encdec_gradients(&model, &x, &y, 1.0, None::<&mut ChaCha8Rng>).unwrap();
    let without = encdec_gradients(&model, &x, &y, 0.0, None::<&mut ChaCha8Rng>).unwrap();
    let id = model.encoder.params.find("block0.weight").unwrap();
    let analytic = with.encoder.data(id)[5] - without.encoder.data(id)[5];
    let adv = |delta: f64| {
        let mut m = model.clone();
        m.encoder.params.get_mut(id).data_mut()[5] += delta;
        encdec_gradients(&m, &x, &y, 1.0, None::<&mut ChaCha8Rng>).unwrap().adv_loss
    };
    (analytic, (adv(H) - adv(-H)) / (2.0 * H))
}
