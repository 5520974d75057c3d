//! Subcommand implementations.

use std::fs;
use std::path::Path;

use fader_core::checkpoint::{self, Checkpoint};
use fader_core::dataset::{sample_dataset, Dataset};
use fader_core::evaluation::{self, linspace, summary_csv, EvalOptions, EvalReport};
use fader_core::imageio::{grid, save_png};
use fader_core::probe::{train_probe, ProbeClassifier};
use fader_core::seed::derive_seed;
use fader_core::training::{self, HistoryRecord};
use fader_core::{AttributeCode, FaderError, Result};

use crate::config::RunConfig;
use crate::service;

/// Refuses to reuse a non-empty directory unless `force` is set, in which case it is cleared.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    let non_empty = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(FaderError::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| FaderError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| FaderError::io(dir, e))
}

pub fn dataset(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = cfg.data_dir();
    prepare_dir(&dir, force)?;
    let m = sample_dataset(&cfg.dataset, cfg.seed, &dir)?;
    println!(
        "dataset {}: {}x{}x{}, attributes {:?}, train {} / valid {} / test {}",
        dir.display(),
        m.image_size[1],
        m.image_size[2],
        m.image_size[0],
        m.attribute_names,
        m.splits.train,
        m.splits.valid,
        m.splits.test
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(&cfg.data_dir())
}

pub fn train(cfg: &RunConfig, force: bool) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let dir = cfg.run_dir();
    prepare_dir(&dir, force)?;
    let outcome = training::train(&ds, &cfg.model, &cfg.train, &dir, |r: &HistoryRecord| {
        println!(
            "step {:>7}  recon {:>10.4}  dis {:.4}  adv {:.4}  lambda {:.6}  dis_acc {:.3}",
            r.step, r.recon_loss, r.dis_loss, r.adv_loss, r.lambda_e, r.dis_accuracy
        );
    })?;
    println!(
        "trained {} steps; {} checkpoints in {}",
        outcome.final_step,
        outcome.checkpoints.len(),
        dir.display()
    );
    Ok(())
}

/// Loads the cached probe, or trains, certifies and caches one.
pub fn probe(cfg: &RunConfig, ds: &Dataset) -> Result<ProbeClassifier> {
    let path = cfg.probe_path();
    if path.is_file() {
        let p = ProbeClassifier::load(&path)?;
        p.certify()?;
        return Ok(p);
    }
    println!("training probe classifier");
    let p = train_probe(ds, &cfg.probe, derive_seed(cfg.seed, "probe"))?;
    println!("probe held-out accuracy {:?}", p.meta.held_out_accuracy);
    p.save(&path)?;
    Ok(p)
}

pub fn eval(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let ds = load_dataset(cfg)?;
    let probe = probe(cfg, &ds)?;
    let run = cfg.run_dir();
    let targets = if cfg.eval.checkpoint_all {
        checkpoint::list_checkpoints(&run)?.into_iter().map(|(_, p)| p).collect()
    } else {
        vec![checkpoint::resolve(&run)?]
    };
    if targets.is_empty() {
        return Err(FaderError::Checkpoint(format!("no checkpoints in {}", run.display())));
    }
    let dir = cfg.eval_dir();
    fs::create_dir_all(&dir).map_err(|e| FaderError::io(&dir, e))?;
    let options = EvalOptions {
        invariance: cfg.eval.invariance.clone(),
        skip_invariance: cfg.eval.skip_invariance,
    };
    let mut reports = Vec::new();
    for path in targets {
        let ck = Checkpoint::load(&path)?;
        let id = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let r = evaluation::evaluate(&ck.model, &id, ck.step(), &ds, &cfg.eval.split, &probe, &options)?;
        println!(
            "{id}: rmse {:.4}  swap {:?}  invariance {:.3}  counterfactual closer {:?}",
            r.recon_rmse, r.swap_accuracy, r.invariance_accuracy, r.counterfactual_closer_fraction
        );
        r.write(&dir.join(format!("{id}.toml")))?;
        reports.push(r);
    }
    let summary = summary_csv(&reports);
    let path = dir.join("summary.csv");
    fs::write(&path, &summary).map_err(|e| FaderError::io(&path, e))?;
    print!("{summary}");
    Ok(reports)
}

pub fn sweep_alphas(cfg: &RunConfig) -> Vec<f64> {
    if cfg.generate.alphas.is_empty() {
        linspace(cfg.model.code_min, cfg.model.code_max, cfg.generate.sweep_points)
    } else {
        cfg.generate.alphas.clone()
    }
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let ck = Checkpoint::load(&cfg.run_dir())?;
    let model = &ck.model;
    let split = ds.split(&cfg.generate.split)?;
    let g = &cfg.generate;
    let count = g.images.min(split.len());
    let alphas = sweep_alphas(cfg);
    let dir = cfg.generate_dir();
    fs::create_dir_all(&dir).map_err(|e| FaderError::io(&dir, e))?;

    let mut strip_rows = Vec::with_capacity(count);
    let mut joint_rows = Vec::with_capacity(count);
    for i in 0..count {
        let image = split.image::<f32>(i);
        let labels = split.labels_of(i);
        let mut row = vec![image.clone()];
        row.extend(evaluation::interpolation_strip(model, &image, labels, g.attr_index, &alphas)?);
        strip_rows.push(row);
        let flipped: Vec<u8> = labels.iter().map(|b| b ^ 1).collect();
        let out = evaluation::strip_from_codes(model, &image, &[AttributeCode::from_bits(&flipped)])?;
        joint_rows.push(vec![image, out.into_iter().next().expect("one code")]);
    }
    let strip_path = dir.join(format!("strip_attr{}.png", g.attr_index));
    save_png(&grid(&strip_rows, 1)?, &strip_path)?;
    let joint_path = dir.join("joint_swap.png");
    save_png(&grid(&joint_rows, 1)?, &joint_path)?;
    println!(
        "wrote {} ({count}x{}) and {} ({count}x2)",
        strip_path.display(),
        1 + alphas.len(),
        joint_path.display()
    );
    Ok(())
}

pub fn serve(cfg: &RunConfig) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| FaderError::io("tokio runtime", e))?;
    let s = &cfg.serve;
    rt.block_on(service::serve(
        cfg.checkpoint_path(),
        &s.host,
        s.port,
        &s.cors_origin,
        s.body_limit,
        |addr| {
            use std::io::Write;
            println!("listening on http://{addr}");
            let _ = std::io::stdout().flush();
        },
    ))
}
