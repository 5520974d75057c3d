//! Independent attribute classifier used to score generated images.
//!
//! Architecture: stride-2 Conv-BN-LeakyReLU blocks followed by one linear
//! layer and a sigmoid per attribute. It is trained on rendered images only.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Dense;
use crate::checkpoint::{self, Header};
use crate::dataset::{Dataset, Split};
use crate::error::{FaderError, Result};
use crate::losses;
use crate::model::{Encoder, ModelConfig};
use crate::nn;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::seed::stream;
use crate::tensor::{FeatureMap, Tensor};
use crate::training::{augment, BatchSampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_layers: usize,
    pub base_filters: usize,
    pub leaky_slope: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub hflip_prob: f64,
    /// Minimum held-out accuracy, per attribute, for the probe to be certified.
    pub threshold: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            base_filters: 16,
            leaky_slope: 0.2,
            batch_size: 64,
            steps: 600,
            learning_rate: 0.001,
            hflip_prob: 0.5,
            threshold: 0.98,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub attribute_names: Vec<String>,
    pub steps: u64,
    /// Per-attribute accuracy on the validation split.
    pub held_out_accuracy: Vec<f64>,
    pub train_accuracy: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ProbeClassifier {
    pub config: ProbeConfig,
    pub meta: ProbeMeta,
    features: Encoder<f32>,
    head_params: ParamStore<f32>,
    head: Dense,
}

const PREDICT_CHUNK: usize = 256;

fn feature_config(config: &ProbeConfig, image_size: usize, channels: usize, n_attributes: usize) -> ModelConfig {
    // small test images cannot take the full depth
    let max_layers = image_size.trailing_zeros().saturating_sub(1).max(1) as usize;
    ModelConfig {
        image_size,
        channels,
        n_attributes,
        n_layers: config.n_layers.min(max_layers),
        base_filters: config.base_filters,
        leaky_slope: config.leaky_slope,
        ..ModelConfig::default()
    }
}

/// Fails with [`FaderError::ProbeRejected`] unless every accuracy reaches `threshold`.
pub fn certify(accuracies: &[f64], threshold: f64) -> Result<()> {
    let worst = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    if accuracies.is_empty() || worst.is_nan() || worst < threshold {
        return Err(FaderError::ProbeRejected {
            accuracy: if accuracies.is_empty() { 0.0 } else { worst },
            threshold,
        });
    }
    Ok(())
}

/// Per-attribute accuracy of `[N, n]` probabilities against `N × n` label bits.
pub fn attribute_accuracy(probs: &Tensor<f32>, labels: &[u8]) -> Vec<f64> {
    let &[n_img, n] = probs.shape() else {
        panic!("probabilities must be [N, n]");
    };
    (0..n)
        .map(|a| {
            let hits = (0..n_img)
                .filter(|&b| u8::from(probs.data()[b * n + a] > 0.5) == labels[b * n + a])
                .count();
            hits as f64 / n_img.max(1) as f64
        })
        .collect()
}

impl ProbeClassifier {
    /// Untrained probe with weights drawn from `seed`.
    pub fn new(config: &ProbeConfig, image_size: usize, channels: usize, attribute_names: &[String], seed: u64) -> Result<Self> {
        let n = attribute_names.len();
        let fc = feature_config(config, image_size, channels, n);
        fc.validate()?;
        let mut rng = stream(seed, "probe.init");
        let features = Encoder::build(&fc, &mut rng);
        let [c, h, w] = fc.latent_shape();
        let mut head_params = ParamStore::new();
        let head = Dense::build("head", c * h * w, n, 1.0, &mut head_params, &mut rng);
        Ok(Self {
            config: config.clone(),
            meta: ProbeMeta {
                seed,
                image_size,
                channels,
                attribute_names: attribute_names.to_vec(),
                steps: 0,
                held_out_accuracy: Vec::new(),
                train_accuracy: Vec::new(),
            },
            features,
            head_params,
            head,
        })
    }

    pub fn n_attributes(&self) -> usize {
        self.meta.attribute_names.len()
    }

    /// Trains on `split` for `config.steps` minibatch updates.
    pub fn fit<R: Rng>(&mut self, split: &Split, rng: &mut R) -> Result<()> {
        let n_attr = self.n_attributes();
        let cfg = self.config.clone();
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: cfg.learning_rate,
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            &[&self.features.params, &self.head_params],
        );
        let mut sampler = BatchSampler::new(split.len(), cfg.batch_size.min(split.len()))?;
        for _ in 0..cfg.steps {
            let idx = sampler.next_batch(rng).to_vec();
            let mut images = split.batch::<f32>(&idx);
            augment(&mut images, cfg.hflip_prob, rng);
            let labels = split.batch_labels(&idx);
            let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
            let x = FeatureMap::from_nchw(&images)?;
            let (z, cache) = self.features.forward_train(&x);
            let flat = nn::flatten(&z);
            let mut probs = self.head.forward(&self.head_params, &flat, idx.len());
            probs.iter_mut().for_each(|v| *v = nn::sigmoid(*v));
            let (loss, dlogits) = losses::bce_with_grad(&probs, &targets, n_attr, idx.len());
            if !loss.is_finite() {
                return Err(FaderError::NonFinite {
                    step: self.meta.steps,
                    detail: format!("probe loss {loss}"),
                });
            }
            let mut head_grads = self.head_params.zeros_like();
            let dflat = self
                .head
                .backward(&self.head_params, &flat, &dlogits, idx.len(), &mut head_grads, true)
                .expect("dx requested");
            let dz = nn::unflatten(&dflat, z.c, z.n, z.h, z.w);
            let feat_grads = self.features.backward(&cache, dz);
            adam.step(
                &mut [&mut self.features.params, &mut self.head_params],
                &[&feat_grads, &head_grads],
            );
            self.features.absorb_batch_stats(&cache);
            self.meta.steps += 1;
        }
        Ok(())
    }

    /// `[N, n]` attribute probabilities for `[N, C, H, W]` images in `[-1, 1]`.
    pub fn predict_proba(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let expect = [self.meta.channels, self.meta.image_size, self.meta.image_size];
        let n_img = match images.shape() {
            [n, rest @ ..] if rest == expect => *n,
            s => {
                return Err(FaderError::Shape(format!(
                    "probe expects [N, {}, {}, {}] images, got {s:?}",
                    expect[0], expect[1], expect[2]
                )))
            }
        };
        let n = self.n_attributes();
        let mut out = vec![0.0f32; n_img * n];
        let mut start = 0;
        while start < n_img {
            let count = PREDICT_CHUNK.min(n_img - start);
            let x = FeatureMap::from_nchw(&images.slice_outer(start, count))?;
            let z = self.features.forward_eval(&x);
            let logits = self.head.forward(&self.head_params, &nn::flatten(&z), count);
            for a in 0..n {
                for b in 0..count {
                    out[(start + b) * n + a] = nn::sigmoid(logits[a * count + b]);
                }
            }
            start += count;
        }
        Tensor::from_vec(&[n_img, n], out)
    }

    /// Hard `N × n` predictions.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<u8>> {
        Ok(self.predict_proba(images)?.data().iter().map(|&p| u8::from(p > 0.5)).collect())
    }

    /// Per-attribute accuracy on a labelled split.
    pub fn split_accuracy(&self, split: &Split) -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..split.len()).collect();
        let probs = self.predict_proba(&split.batch(&idx))?;
        Ok(attribute_accuracy(&probs, &split.labels))
    }

    pub fn certify(&self) -> Result<()> {
        certify(&self.meta.held_out_accuracy, self.config.threshold)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: checkpoint::CONTAINER_VERSION,
            kind: "probe".into(),
            model_config: serde_json::to_value(&self.config).expect("serializable config"),
            step: self.meta.steps,
            attribute_names: self.meta.attribute_names.clone(),
            training: None,
            extra: serde_json::to_value(&self.meta).expect("serializable meta"),
            tensors: Vec::new(),
        };
        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (prefix, store) in [
            ("features.", &self.features.params),
            ("features.buffers.", &self.features.buffers),
            ("head.", &self.head_params),
        ] {
            tensors.extend(store.iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        checkpoint::write_container(path, header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = checkpoint::read_container(path)?;
        if header.kind != "probe" {
            return Err(FaderError::Checkpoint(format!(
                "{}: expected a probe, found {:?}",
                path.display(),
                header.kind
            )));
        }
        let parse = |e: serde_json::Error| FaderError::Checkpoint(format!("{}: {e}", path.display()));
        let config: ProbeConfig = serde_json::from_value(header.model_config).map_err(parse)?;
        let meta: ProbeMeta = serde_json::from_value(header.extra).map_err(parse)?;
        let mut probe = Self::new(&config, meta.image_size, meta.channels, &meta.attribute_names, meta.seed)?;
        let lookup = |n: &str| tensors.get(n).cloned();
        probe.features.params.load_from("features.", lookup)?;
        probe.features.buffers.load_from("features.buffers.", lookup)?;
        probe.head_params.load_from("head.", lookup)?;
        probe.meta = meta;
        Ok(probe)
    }
}

/// Trains a probe on the training split and certifies it on the validation split.
pub fn train_probe(dataset: &Dataset, config: &ProbeConfig, seed: u64) -> Result<ProbeClassifier> {
    let [c, h, _] = dataset.manifest.image_size;
    let mut probe = ProbeClassifier::new(config, h, c, &dataset.manifest.attribute_names, seed)?;
    let mut rng = stream(seed, "probe.train");
    probe.fit(&dataset.train, &mut rng)?;
    probe.meta.held_out_accuracy = probe.split_accuracy(&dataset.valid)?;
    probe.meta.train_accuracy = probe.split_accuracy(&dataset.train)?;
    probe.certify()?;
    Ok(probe)
}
