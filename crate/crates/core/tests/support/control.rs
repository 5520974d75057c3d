//! Plain autoencoder loop assembled from public pieces, with no discriminator
//! anywhere, run side by side with `train_step` at `λ_E = 0`.

use fader_core::dataset::{generate, DatasetParams};
use fader_core::model::code_channels;
use fader_core::optim::Adam;
use fader_core::tensor::{FeatureMap, Real};
use fader_core::training::{train_step, TrainState};
use fader_core::{AttributeCode, ModelConfig, TrainConfig};

pub struct Reduction {
    pub steps: u64,
    /// Encoder and decoder scalars whose bits differ after the run.
    pub differing: usize,
    pub compared: usize,
}

pub fn autoencoder_reduction(steps: u64, batch: usize) -> Reduction {
    let params = DatasetParams {
        train: 256,
        valid: 64,
        test: 64,
        ..DatasetParams::default()
    };
    let data = generate(&params, 5).unwrap();
    let split = data.split("train").unwrap();
    let model_cfg = ModelConfig::default();
    let cfg = TrainConfig {
        lambda_max: 0.0,
        batch_size: batch,
        total_steps: steps,
        seed: 9,
        ..TrainConfig::default()
    };

    let mut state = TrainState::<f32>::init(&model_cfg, &cfg).unwrap();
    let mut enc = state.model.encoder.clone();
    let mut dec = state.model.decoder.clone();
    let mut adam = Adam::new(cfg.adam(), &[&enc.params, &dec.params]);

    for s in 0..steps as usize {
        let idx: Vec<usize> = (0..batch).map(|i| (s * batch + i) % split.len()).collect();
        let images = split.batch::<f32>(&idx);
        let labels = split.batch_labels(&idx);
        train_step(&mut state, &images, &labels, &cfg).unwrap();

        let x = FeatureMap::from_nchw(&images).unwrap();
        let codes: Vec<AttributeCode> = labels.chunks(2).map(AttributeCode::from_bits).collect();
        let (z, ec) = enc.forward_train(&x);
        let (r, dc) = dec.forward_train(&z, &code_channels::<f32>(&codes));
        let k = f32::lit(2.0 / batch as f64);
        let grad: Vec<f32> = r.data.iter().zip(&x.data).map(|(&a, &t)| k * (a - t)).collect();
        let (dg, dz) = dec.backward(&dc, FeatureMap { data: grad, ..r });
        let eg = enc.backward(&ec, dz);
        adam.step(&mut [&mut enc.params, &mut dec.params], &[&eg, &dg]);
        enc.absorb_batch_stats(&ec);
        dec.absorb_batch_stats(&dc);
    }

    let mut differing = 0;
    let mut compared = 0;
    for (a, b) in [
        (&state.model.encoder.params, &enc.params),
        (&state.model.decoder.params, &dec.params),
        (&state.model.encoder.buffers, &enc.buffers),
        (&state.model.decoder.buffers, &dec.buffers),
    ] {
        for (ta, tb) in a.tensors().iter().zip(b.tensors()) {
            compared += ta.len();
            differing += ta.data().iter().zip(tb.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
        }
    }
    Reduction {
        steps,
        differing,
        compared,
    }
}
