//! One point of the desk-scale tuning sweep: train on the default sprite
//! dataset and print the evaluation report.
//!
//! `cargo run --example sweep -- <out_dir> <steps> <lambda_max> [dis_updates] [dropout]`
//!
//! `dis_updates` > 1 runs that many discriminator steps (on fresh batches)
//! before each encoder-decoder step; the library loop always uses one.

use std::path::PathBuf;
use std::time::Instant;

use fader_core::dataset::{sample_dataset, Dataset, DatasetParams};
use fader_core::evaluation::{self, linspace, EvalOptions};
use fader_core::probe::{train_probe, ProbeConfig};
use fader_core::training::{augment, discriminator_gradients, encdec_gradients, train, BatchSampler, TrainState};
use fader_core::{FaderModel, ModelConfig, Result, TrainConfig};

fn custom_loop(ds: &Dataset, model: &ModelConfig, cfg: &TrainConfig, dis_updates: usize) -> Result<FaderModel<f32>> {
    let mut st = TrainState::<f32>::init(model, cfg)?;
    let mut sampler = BatchSampler::new(ds.train.len(), cfg.batch_size)?;
    let mut batch = |st: &mut TrainState<f32>| {
        let idx = sampler.next_batch(&mut st.rngs.shuffle).to_vec();
        let mut x = ds.train.batch::<f32>(&idx);
        augment(&mut x, cfg.hflip_prob, &mut st.rngs.augment);
        (x, ds.train.batch_labels(&idx))
    };
    for step in 0..cfg.total_steps {
        for _ in 0..dis_updates {
            let (x, y) = batch(&mut st);
            let d = discriminator_gradients(&st.model, &x, &y, Some(&mut st.rngs.dropout))?;
            st.dis_optimizer.step(&mut [&mut st.model.discriminator.params], &[&d.grads]);
            st.model.discriminator.absorb_batch_stats(&d.cache);
        }
        let (x, y) = batch(&mut st);
        let e = encdec_gradients(&st.model, &x, &y, cfg.lambda_at(step), Some(&mut st.rngs.dropout))?;
        let m = &mut st.model;
        st.ae_optimizer.step(&mut [&mut m.encoder.params, &mut m.decoder.params], &[&e.encoder, &e.decoder]);
        m.encoder.absorb_batch_stats(&e.encoder_cache);
        m.decoder.absorb_batch_stats(&e.decoder_cache);
        if step % 1000 == 0 {
            println!("step {step} recon {:.2} adv {:.3}", e.recon_loss, e.adv_loss);
        }
    }
    Ok(st.model)
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 4 {
        eprintln!("usage: sweep <out_dir> <steps> <lambda_max> [dis_updates] [dropout]");
        std::process::exit(2);
    }
    let out = PathBuf::from(&args[1]);
    let steps: u64 = args[2].parse().expect("steps");
    let lambda_max: f64 = args[3].parse().expect("lambda_max");
    let dis_updates: usize = args.get(4).map_or(1, |s| s.parse().expect("dis_updates"));
    let dropout: f64 = args.get(5).map_or(0.3, |s| s.parse().expect("dropout"));

    let data_dir = out.join("data");
    if !data_dir.join("manifest.toml").exists() {
        sample_dataset(&DatasetParams::default(), 0, &data_dir)?;
    }
    let ds = Dataset::load(&data_dir)?;
    let probe = train_probe(&ds, &ProbeConfig::default(), 0)?;
    println!("probe held-out {:?}", probe.meta.held_out_accuracy);

    let model = ModelConfig {
        dropout_rate: dropout,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        total_steps: steps,
        lambda_max,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let trained = if dis_updates == 1 {
        let run = out.join(format!("run_l{lambda_max}_s{steps}_d{dropout}"));
        train(&ds, &model, &cfg, &run, |r| {
            if r.step % 1000 == 0 {
                println!("step {} recon {:.2} adv {:.3} dis_acc {:.3}", r.step, r.recon_loss, r.adv_loss, r.dis_accuracy);
            }
        })?;
        fader_core::checkpoint::Checkpoint::load(&run)?.model
    } else {
        custom_loop(&ds, &model, &cfg, dis_updates)?
    };
    println!("trained in {:.0?}", t.elapsed());

    let report = evaluation::evaluate(&trained, "sweep", steps, &ds, "test", &probe, &EvalOptions::default())?;
    println!("{}", report.to_toml());
    for k in 0..2 {
        let m = evaluation::strip_monotonicity(&trained, &probe, &ds.test, k, &linspace(-1.0, 2.0, 7), 0.9)?;
        println!("monotone fraction, attribute {k}: {}", m.fraction);
    }
    Ok(())
}
