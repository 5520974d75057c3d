//! Milliseconds per training step at the default desk configuration.

use std::time::Instant;

use fader_core::dataset::{generate, DatasetParams};
use fader_core::training::{train_step, TrainConfig, TrainState};
use fader_core::ModelConfig;

fn main() {
    let params = DatasetParams { train: 256, valid: 64, test: 64, ..DatasetParams::default() };
    let ds = generate(&params, 1).unwrap();
    let cfg = TrainConfig::default();
    let mut state = TrainState::<f32>::init(&ModelConfig::default(), &cfg).unwrap();
    let idx: Vec<usize> = (0..32).collect();
    let x = ds.train.batch::<f32>(&idx);
    let y = ds.train.batch_labels(&idx);
    for _ in 0..5 {
        train_step(&mut state, &x, &y, &cfg).unwrap();
    }
    let t = Instant::now();
    let n = 50;
    for _ in 0..n {
        train_step(&mut state, &x, &y, &cfg).unwrap();
    }
    println!("{:.2} ms/step", t.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
