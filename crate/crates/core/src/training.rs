//! Alternating latent-adversarial training.
//!
//! Each iteration first updates the discriminator on latents from the current
//! encoder, then updates encoder and decoder jointly against the freshly
//! updated discriminator.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{Dataset, Split};
use crate::error::{FaderError, Result};
use crate::losses::{self, lambda_schedule};
use crate::model::{
    code_channels, AttributeCode, DecoderCache, DiscriminatorCache, EncoderCache, FaderModel, ModelConfig,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::seed::{derive_seed, stream};
use crate::tensor::{FeatureMap, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Sized for the per-example pixel-sum reconstruction term at 32x32.
    pub lambda_max: f64,
    /// Length of the `λ_E` ramp; 20% of `total_steps` when unset.
    pub warmup_steps: Option<u64>,
    pub total_steps: u64,
    pub hflip_prob: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            lambda_max: 3.0,
            warmup_steps: None,
            total_steps: 30_000,
            hflip_prob: 0.5,
            seed: 0,
            log_every: 100,
            checkpoint_every: 5_000,
        }
    }
}

impl TrainConfig {
    /// The published large-scale schedule: `λ_E` ramps to 1e-4 over 500k iterations.
    pub fn published_schedule() -> Self {
        Self {
            lambda_max: 0.0001,
            warmup_steps: Some(500_000),
            ..Self::default()
        }
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.total_steps / 5)
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        lambda_schedule(step, self.warmup(), self.lambda_max)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FaderError::Config(m.to_string()));
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return bad("lambda_max must be a finite value >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("hflip_prob must lie in [0, 1]");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log_every and checkpoint_every must be positive");
        }
        Ok(())
    }
}

/// Independent random streams, so that e.g. dropout draws never shift the augmentation stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRngs {
    pub dropout: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            dropout: stream(seed, "train.dropout"),
            augment: stream(seed, "train.augment"),
            shuffle: stream(seed, "train.shuffle"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: FaderModel<T>,
    /// Discriminator optimizer.
    pub dis_optimizer: Adam<T>,
    /// Joint encoder + decoder optimizer (two groups, shared step).
    pub ae_optimizer: Adam<T>,
    pub step: u64,
    pub rngs: TrainRngs,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: FaderModel<T>, config: &TrainConfig) -> Self {
        let adam = config.adam();
        let dis_optimizer = Adam::new(adam, &[&model.discriminator.params]);
        let ae_optimizer = Adam::new(adam, &[&model.encoder.params, &model.decoder.params]);
        Self {
            model,
            dis_optimizer,
            ae_optimizer,
            step: 0,
            rngs: TrainRngs::new(config.seed),
        }
    }

    /// Fresh model from `seed` (namespaced) plus fresh optimizer state.
    pub fn init(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        let model = FaderModel::init(model_config, derive_seed(config.seed, "model.init"))?;
        Ok(Self::new(model, config))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// Zero-based index of the update.
    pub step: u64,
    pub recon_loss: f64,
    pub dis_loss: f64,
    pub adv_loss: f64,
    pub lambda_e: f64,
    pub dis_accuracy: f64,
}

pub const HISTORY_HEADER: [&str; 6] = ["step", "recon_loss", "dis_loss", "adv_loss", "lambda_e", "dis_accuracy"];

/// Mirrors each image left-right with probability `prob`; returns how many were flipped.
pub fn augment<T: Real, R: Rng + ?Sized>(images: &mut Tensor<T>, prob: f64, rng: &mut R) -> usize {
    let &[n, c, h, w] = images.shape() else {
        panic!("augment expects an [N, C, H, W] batch");
    };
    let per = c * h * w;
    let mut flipped = 0;
    for b in 0..n {
        // one draw per image regardless of prob keeps streams aligned across configs
        let u: f64 = rng.random();
        if u < prob {
            flipped += 1;
            for row in images.data_mut()[b * per..(b + 1) * per].chunks_mut(w) {
                row.reverse();
            }
        }
    }
    flipped
}

fn check_batch<T: Real>(model: &FaderModel<T>, images: &Tensor<T>, labels: &[u8]) -> Result<usize> {
    model.check_images(images)?;
    let n = images.shape()[0];
    if labels.len() != n * model.config.n_attributes {
        return Err(FaderError::Shape(format!(
            "{} labels for {n} images with {} attributes",
            labels.len(),
            model.config.n_attributes
        )));
    }
    Ok(n)
}

pub fn label_codes(labels: &[u8], n_attributes: usize) -> Vec<AttributeCode> {
    labels.chunks(n_attributes).map(AttributeCode::from_bits).collect()
}

fn finite_or_abort(step: u64, record: &HistoryRecord) -> Result<()> {
    let vals = [record.recon_loss, record.dis_loss, record.adv_loss];
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FaderError::NonFinite {
            step,
            detail: format!(
                "recon_loss={} dis_loss={} adv_loss={} lambda_e={}",
                record.recon_loss, record.dis_loss, record.adv_loss, record.lambda_e
            ),
        })
    }
}

/// Discriminator objective and its parameter gradients, encoder held fixed.
pub struct DiscriminatorStep<T> {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: ParamStore<T>,
    pub cache: DiscriminatorCache<T>,
}

/// Evaluates the discriminator loss on latents of the current encoder (batch statistics).
pub fn discriminator_gradients<T: Real, R: Rng + ?Sized>(
    model: &FaderModel<T>,
    images: &Tensor<T>,
    labels: &[u8],
    dropout: Option<&mut R>,
) -> Result<DiscriminatorStep<T>> {
    let batch = check_batch(model, images, labels)?;
    let n_attr = model.config.n_attributes;
    let x = FeatureMap::from_nchw(images)?;
    let (z, _) = model.encoder.forward_train(&x);
    let cache = model.discriminator.forward_train(&z, dropout);
    let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    let (loss, dlogits) = losses::bce_with_grad(&cache.probs, &targets, n_attr, batch);
    let accuracy = losses::accuracy(&cache.probs, labels, n_attr, batch);
    let (grads, _) = model.discriminator.backward(&cache, &dlogits, false);
    Ok(DiscriminatorStep {
        loss,
        accuracy,
        grads,
        cache,
    })
}

/// Encoder-decoder objective and gradients, discriminator held fixed.
pub struct EncDecStep<T> {
    pub recon_loss: f64,
    /// Flipped-label NLL, before scaling by `λ_E`.
    pub adv_loss: f64,
    /// `recon_loss + λ_E * adv_loss`
    pub loss: f64,
    pub encoder: ParamStore<T>,
    pub decoder: ParamStore<T>,
    pub encoder_cache: EncoderCache<T>,
    pub decoder_cache: DecoderCache<T>,
}

pub fn encdec_gradients<T: Real, R: Rng + ?Sized>(
    model: &FaderModel<T>,
    images: &Tensor<T>,
    labels: &[u8],
    lambda: f64,
    dropout: Option<&mut R>,
) -> Result<EncDecStep<T>> {
    let batch = check_batch(model, images, labels)?;
    let n_attr = model.config.n_attributes;
    let x = FeatureMap::from_nchw(images)?;
    let (z, encoder_cache) = model.encoder.forward_train(&x);
    let codes = code_channels::<T>(&label_codes(labels, n_attr));
    let (recon, decoder_cache) = model.decoder.forward_train(&z, &codes);
    let recon_loss = losses::reconstruction_loss_raw(&recon.data, &x.data, batch);

    let adv_cache = model.discriminator.forward_train(&z, dropout);
    let flipped = losses::flipped_targets(labels);
    let (adv_loss, mut dlogits) = losses::bce_with_grad(&adv_cache.probs, &flipped, n_attr, batch);
    let drecon = FeatureMap {
        data: losses::reconstruction_grad(&recon.data, &x.data, batch),
        ..recon
    };
    let (decoder, mut dz) = model.decoder.backward(&decoder_cache, drecon);
    // at λ_E = 0 the term contributes an exact zero; skipping it also keeps signed zeros intact
    if lambda != 0.0 {
        let lam = T::lit(lambda);
        dlogits.iter_mut().for_each(|g| *g = *g * lam);
        let (_, dz_adv) = model.discriminator.backward(&adv_cache, &dlogits, true);
        let dz_adv = dz_adv.expect("latent gradient requested");
        dz.data.iter_mut().zip(&dz_adv.data).for_each(|(a, &b)| *a = *a + b);
    }
    let encoder = model.encoder.backward(&encoder_cache, dz);
    Ok(EncDecStep {
        recon_loss,
        adv_loss,
        loss: recon_loss + lambda * adv_loss,
        encoder,
        decoder,
        encoder_cache,
        decoder_cache,
    })
}

/// One discriminator update followed by one encoder-decoder update against the
/// updated discriminator.
///
/// `images` must already be augmented. A non-finite loss aborts the step before
/// the update that would consume it is applied.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    images: &Tensor<T>,
    labels: &[u8],
    config: &TrainConfig,
) -> Result<HistoryRecord> {
    let step = state.step;
    let lambda = config.lambda_at(step);
    let dis = discriminator_gradients(&state.model, images, labels, Some(&mut state.rngs.dropout))?;
    let mut record = HistoryRecord {
        step,
        recon_loss: 0.0,
        dis_loss: dis.loss,
        adv_loss: 0.0,
        lambda_e: lambda,
        dis_accuracy: dis.accuracy,
    };
    finite_or_abort(step, &record)?;
    {
        let d = &mut state.model.discriminator;
        state.dis_optimizer.step(&mut [&mut d.params], &[&dis.grads]);
        d.absorb_batch_stats(&dis.cache);
    }

    let ed = encdec_gradients(&state.model, images, labels, lambda, Some(&mut state.rngs.dropout))?;
    record.recon_loss = ed.recon_loss;
    record.adv_loss = ed.adv_loss;
    finite_or_abort(step, &record)?;
    let m = &mut state.model;
    state
        .ae_optimizer
        .step(&mut [&mut m.encoder.params, &mut m.decoder.params], &[&ed.encoder, &ed.decoder]);
    m.encoder.absorb_batch_stats(&ed.encoder_cache);
    m.decoder.absorb_batch_stats(&ed.decoder_cache);
    state.step += 1;
    Ok(record)
}

/// Epoch-shuffled batch order; the last partial batch is dropped.
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize) -> Result<Self> {
        if len < batch_size {
            return Err(FaderError::Config(format!(
                "training split has {len} images, fewer than batch size {batch_size}"
            )));
        }
        Ok(Self {
            len,
            batch_size,
            order: Vec::new(),
            cursor: usize::MAX,
        })
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[usize] {
        if self.cursor.saturating_add(self.batch_size) > self.order.len() {
            self.order = (0..self.len).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        out
    }
}

/// Checks that a dataset can feed a model.
pub fn check_dataset(dataset: &Dataset, model: &ModelConfig) -> Result<()> {
    let m = &dataset.manifest;
    let [c, h, w] = m.image_size;
    if m.n_attributes != model.n_attributes || c != model.channels || h != model.image_size || w != model.image_size {
        return Err(FaderError::Config(format!(
            "dataset ({} attributes, {c}x{h}x{w}) does not match model ({} attributes, {}x{}x{})",
            m.n_attributes, model.n_attributes, model.channels, model.image_size, model.image_size
        )));
    }
    Ok(())
}

pub struct HistoryLog {
    file: File,
    path: PathBuf,
}

impl HistoryLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| FaderError::io(path, e))?;
        writeln!(file, "{}", HISTORY_HEADER.join(",")).map_err(|e| FaderError::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, r: &HistoryRecord) -> Result<()> {
        writeln!(
            self.file,
            "{},{},{},{},{},{}",
            r.step, r.recon_loss, r.dis_loss, r.adv_loss, r.lambda_e, r.dis_accuracy
        )
        .and_then(|_| self.file.flush())
        .map_err(|e| FaderError::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<HistoryRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub history: Vec<HistoryRecord>,
    pub final_step: u64,
}

pub const HISTORY_FILE: &str = "history.csv";

/// Full training run: writes `ckpt_<step>` files, the `ckpt_latest` marker and
/// `history.csv` into `out_dir`.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: &Path,
    mut progress: impl FnMut(&HistoryRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    check_dataset(dataset, model_config)?;
    fs::create_dir_all(out_dir).map_err(|e| FaderError::io(out_dir, e))?;
    let mut state = TrainState::<f32>::init(model_config, config)?;
    let names = &dataset.manifest.attribute_names;
    let mut sampler = BatchSampler::new(dataset.train.len(), config.batch_size)?;
    let mut log = HistoryLog::create(&out_dir.join(HISTORY_FILE))?;
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let save = |state: &TrainState<f32>, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        let path = checkpoint::save_train_state(out_dir, state, config, names)?;
        checkpoints.push(path);
        Ok(())
    };
    if config.total_steps == 0 {
        save(&state, &mut checkpoints)?;
    }
    while state.step < config.total_steps {
        let (mut images, labels) = next_training_batch(&dataset.train, &mut sampler, &mut state.rngs.shuffle);
        augment(&mut images, config.hflip_prob, &mut state.rngs.augment);
        let record = train_step(&mut state, &images, &labels, config)?;
        if record.step % config.log_every == 0 || state.step == config.total_steps {
            log.append(&record)?;
            progress(&record);
            history.push(record);
        }
        if state.step % config.checkpoint_every == 0 || state.step == config.total_steps {
            save(&state, &mut checkpoints)?;
        }
    }
    Ok(TrainOutcome {
        checkpoints,
        history,
        final_step: state.step,
    })
}

fn next_training_batch(split: &Split, sampler: &mut BatchSampler, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Vec<u8>) {
    let idx = sampler.next_batch(rng).to_vec();
    (split.batch(&idx), split.batch_labels(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn flip_probability_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let orig = Tensor::from_vec(&[2, 1, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let mut t = orig.clone();
        assert_eq!(augment(&mut t, 0.0, &mut rng), 0);
        assert_eq!(t, orig);
        assert_eq!(augment(&mut t, 1.0, &mut rng), 2);
        assert_eq!(&t.data()[..3], &[2.0, 1.0, 0.0]);
        augment(&mut t, 1.0, &mut rng);
        assert_eq!(t, orig);
    }

    #[test]
    fn sampler_covers_epoch_and_drops_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = BatchSampler::new(10, 3).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(&mut rng).to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(BatchSampler::new(2, 3).is_err());
    }

    #[test]
    fn warmup_defaults_to_a_fifth() {
        let c = TrainConfig {
            total_steps: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(c.warmup(), 200);
        assert_eq!(c.lambda_at(100), c.lambda_max / 2.0);
        assert_eq!(TrainConfig::published_schedule().warmup(), 500_000);
    }

    #[test]
    fn invalid_configs() {
        for c in [
            TrainConfig { lambda_max: -1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { hflip_prob: 1.5, ..TrainConfig::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
