//! Model-selection metrics and counterfactual checks.
//!
//! All accuracies are measured on held-out splits. Images and latents are
//! processed in chunks, in inference mode.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{CounterfactualSet, Split};
use crate::error::{FaderError, Result};
use crate::losses;
use crate::model::{AttributeCode, FaderModel, ModelConfig};
use crate::optim::Adam;
use crate::probe::{attribute_accuracy, ProbeClassifier};
use crate::seed::{derive_seed, stream};
use crate::tensor::{FeatureMap, Tensor};
use crate::training::{BatchSampler, TrainConfig};

const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionError {
    pub mse: f64,
    pub rmse: f64,
}

impl ReconstructionError {
    pub fn from_mse(mse: f64) -> Self {
        Self { mse, rmse: mse.sqrt() }
    }
}

/// Applies `f` to consecutive chunks of `0..len`.
fn for_chunks(len: usize, mut f: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    let all: Vec<usize> = (0..len).collect();
    for idx in all.chunks(CHUNK) {
        f(idx)?;
    }
    Ok(())
}

fn codes_for(labels: &[u8], n: usize, edit: impl Fn(&mut [u8])) -> Vec<AttributeCode> {
    labels
        .chunks(n)
        .map(|l| {
            let mut bits = l.to_vec();
            edit(&mut bits);
            AttributeCode::from_bits(&bits)
        })
        .collect()
}

/// Maps a batch of images and one target code per image to edited images.
/// The trained model is the main implementation; tests plug in reference editors.
pub trait Editor {
    fn n_attributes(&self) -> usize;
    fn edit(&self, images: &Tensor<f32>, codes: &[AttributeCode]) -> Result<Tensor<f32>>;
}

impl Editor for FaderModel<f32> {
    fn n_attributes(&self) -> usize {
        self.config.n_attributes
    }

    fn edit(&self, images: &Tensor<f32>, codes: &[AttributeCode]) -> Result<Tensor<f32>> {
        self.reconstruct(images, codes)
    }
}

fn check_attr<E: Editor + ?Sized>(model: &E, attr_index: usize) -> Result<()> {
    if attr_index >= model.n_attributes() {
        return Err(FaderError::Range(format!(
            "attribute index {attr_index} out of range for {} attributes",
            model.n_attributes()
        )));
    }
    Ok(())
}

/// Decodes every image of `split` with its labels transformed by `edit`.
pub fn decode_edited<E: Editor + ?Sized>(model: &E, split: &Split, edit: impl Fn(&mut [u8]) + Copy) -> Result<Tensor<f32>> {
    let n = model.n_attributes();
    let per = split.image_bytes();
    let mut out = Vec::with_capacity(split.len() * per);
    for_chunks(split.len(), |idx| {
        let x = split.batch::<f32>(idx);
        let codes = codes_for(&split.batch_labels(idx), n, edit);
        out.extend_from_slice(model.edit(&x, &codes)?.data());
        Ok(())
    })?;
    Tensor::from_vec(&[split.len(), split.channels, split.height, split.width], out)
}

/// Inference-mode latents of every image in `split`.
pub fn encode_split(model: &FaderModel<f32>, split: &Split) -> Result<Tensor<f32>> {
    let [c, h, w] = model.config.latent_shape();
    let mut out = Vec::with_capacity(split.len() * c * h * w);
    for_chunks(split.len(), |idx| {
        out.extend_from_slice(model.encode(&split.batch(idx))?.data());
        Ok(())
    })?;
    Tensor::from_vec(&[split.len(), c, h, w], out)
}

/// Per-pixel error of `decode(encode(x), code(y))` against `x`, in `[-1, 1]` units.
pub fn reconstruction_error<E: Editor + ?Sized>(model: &E, split: &Split) -> Result<ReconstructionError> {
    let recon = decode_edited(model, split, |_| {})?;
    let target = split.batch::<f32>(&(0..split.len()).collect::<Vec<_>>());
    Ok(ReconstructionError::from_mse(pixel_mse(recon.data(), target.data())))
}

pub fn pixel_mse(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x - y);
            d * d
        })
        .sum();
    sum / a.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapResult {
    pub attr_index: usize,
    /// Fraction of swapped generations the probe labels with the flipped value.
    pub accuracy: f64,
    /// Probe accuracy on the other attributes, which should keep their original values.
    pub kept_accuracy: Vec<f64>,
}

/// Scores `[N, C, H, W]` generations with the probe against the intended labels.
pub fn probe_agreement(probe: &ProbeClassifier, images: &Tensor<f32>, intended: &[u8]) -> Result<Vec<f64>> {
    Ok(attribute_accuracy(&probe.predict_proba(images)?, intended))
}

pub fn swap_accuracy<E: Editor + ?Sized>(model: &E, probe: &ProbeClassifier, split: &Split, attr_index: usize) -> Result<SwapResult> {
    check_attr(model, attr_index)?;
    let flip = move |b: &mut [u8]| b[attr_index] ^= 1;
    let out = decode_edited(model, split, flip)?;
    let n = model.n_attributes();
    let mut intended = split.labels.clone();
    intended.chunks_mut(n).for_each(flip);
    let acc = probe_agreement(probe, &out, &intended)?;
    Ok(SwapResult {
        attr_index,
        accuracy: acc[attr_index],
        kept_accuracy: acc.iter().enumerate().filter(|(k, _)| *k != attr_index).map(|(_, &a)| a).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSwapResult {
    /// Per-attribute probe agreement with the flipped values.
    pub per_attribute: Vec<f64>,
    /// Fraction of images for which every attribute is predicted flipped.
    pub all_flipped: f64,
}

/// Flips every attribute at once.
pub fn joint_swap_accuracy<E: Editor + ?Sized>(model: &E, probe: &ProbeClassifier, split: &Split) -> Result<JointSwapResult> {
    let n = model.n_attributes();
    let flip_all = |b: &mut [u8]| b.iter_mut().for_each(|v| *v ^= 1);
    let out = decode_edited(model, split, flip_all)?;
    let intended: Vec<u8> = split.labels.iter().map(|v| v ^ 1).collect();
    let pred = probe.predict(&out)?;
    let all = pred
        .chunks(n)
        .zip(intended.chunks(n))
        .filter(|(p, t)| p == t)
        .count();
    Ok(JointSwapResult {
        per_attribute: probe_agreement(probe, &out, &intended)?,
        all_flipped: all as f64 / split.len().max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvarianceConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.002,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceResult {
    /// Best held-out accuracy reached during the probe's training, per attribute.
    pub per_attribute: Vec<f64>,
    /// Maximum of `per_attribute`.
    pub accuracy: f64,
    /// Held-out accuracy of always predicting the more frequent value, per attribute.
    pub majority_rate: Vec<f64>,
}

fn majority_rate(labels: &[u8], n: usize) -> Vec<f64> {
    let count = labels.len() / n.max(1);
    (0..n)
        .map(|a| {
            let ones = labels.iter().skip(a).step_by(n).filter(|&&v| v == 1).count();
            ones.max(count - ones) as f64 / count.max(1) as f64
        })
        .collect()
}

/// Trains a fresh discriminator on fixed latents and reports its best test accuracy.
///
/// Latents are `[N, C, h, w]` in the shape `model_config` prescribes.
pub fn invariance_probe_latents(
    model_config: &ModelConfig,
    train: (&Tensor<f32>, &[u8]),
    test: (&Tensor<f32>, &[u8]),
    config: &InvarianceConfig,
) -> Result<InvarianceResult> {
    let n = model_config.n_attributes;
    let fresh = FaderModel::<f32>::init(model_config, derive_seed(config.seed, "invariance.init"))?;
    let mut dis = fresh.discriminator;
    let adam_cfg = TrainConfig {
        learning_rate: config.learning_rate,
        ..TrainConfig::default()
    }
    .adam();
    let mut adam = Adam::new(adam_cfg, &[&dis.params]);
    let mut dropout = stream(config.seed, "invariance.dropout");
    let mut shuffle = stream(config.seed, "invariance.shuffle");
    let (train_z, train_y) = train;
    let (test_z, test_y) = test;
    let n_train = train_z.shape()[0];
    let batch = config.batch_size.min(n_train).max(1);
    let mut sampler = BatchSampler::new(n_train, batch)?;
    let per = train_z.len() / n_train.max(1);
    let mut best = vec![0.0f64; n];
    for _ in 0..config.epochs {
        for _ in 0..n_train / batch {
            let idx = sampler.next_batch(&mut shuffle).to_vec();
            let mut data = Vec::with_capacity(idx.len() * per);
            let mut labels = Vec::with_capacity(idx.len() * n);
            for &i in &idx {
                data.extend_from_slice(&train_z.data()[i * per..(i + 1) * per]);
                labels.extend_from_slice(&train_y[i * n..(i + 1) * n]);
            }
            let mut shape = train_z.shape().to_vec();
            shape[0] = idx.len();
            let z = FeatureMap::from_nchw(&Tensor::from_vec(&shape, data)?)?;
            let targets: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
            let cache = dis.forward_train(&z, Some(&mut dropout));
            let (_, dlogits) = losses::bce_with_grad(&cache.probs, &targets, n, idx.len());
            let (grads, _) = dis.backward(&cache, &dlogits, false);
            adam.step(&mut [&mut dis.params], &[&grads]);
            dis.absorb_batch_stats(&cache);
        }
        let mut probs = Vec::with_capacity(test_y.len());
        let n_test = test_z.shape()[0];
        let mut start = 0;
        while start < n_test {
            let count = CHUNK.min(n_test - start);
            let z = FeatureMap::from_nchw(&test_z.slice_outer(start, count))?;
            let p = dis.forward_eval(&z);
            for b in 0..count {
                for a in 0..n {
                    probs.push(p[a * count + b]);
                }
            }
            start += count;
        }
        let acc = attribute_accuracy(&Tensor::from_vec(&[n_test, n], probs)?, test_y);
        best.iter_mut().zip(&acc).for_each(|(b, &a)| *b = b.max(a));
    }
    Ok(InvarianceResult {
        accuracy: best.iter().copied().fold(0.0, f64::max),
        per_attribute: best,
        majority_rate: majority_rate(test_y, n),
    })
}

/// Freezes the model, encodes both splits and runs [`invariance_probe_latents`].
pub fn invariance_probe(
    model: &FaderModel<f32>,
    train: &Split,
    test: &Split,
    config: &InvarianceConfig,
) -> Result<InvarianceResult> {
    let zt = encode_split(model, train)?;
    let zv = encode_split(model, test)?;
    invariance_probe_latents(&model.config, (&zt, &train.labels), (&zv, &test.labels), config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub attr_index: usize,
    pub pairs: usize,
    /// RMSE between the swapped output and the ground-truth counterfactual.
    pub rmse_counterfactual: f64,
    /// RMSE between the swapped output and the original image.
    pub rmse_original: f64,
    /// Fraction of pairs whose output is closer to the counterfactual than to the original.
    pub closer_fraction: f64,
}

pub fn counterfactual_error<E: Editor + ?Sized>(
    model: &E,
    originals: &Split,
    set: &CounterfactualSet,
    attr_index: usize,
) -> Result<CounterfactualResult> {
    check_attr(model, attr_index)?;
    let pairs = set.indices_for(attr_index);
    if pairs.is_empty() {
        return Err(FaderError::Dataset(format!("no counterfactual pairs for attribute {attr_index}")));
    }
    let n = model.n_attributes();
    let (mut se_cf, mut se_orig, mut closer, mut count) = (0.0, 0.0, 0usize, 0usize);
    for chunk in pairs.chunks(CHUNK) {
        let orig_idx: Vec<usize> = chunk.iter().map(|&p| set.pairs[p].original_index).collect();
        let x = originals.batch::<f32>(&orig_idx);
        let codes = codes_for(&originals.batch_labels(&orig_idx), n, |b| b[attr_index] ^= 1);
        let out = model.edit(&x, &codes)?;
        let target = set.images.batch::<f32>(chunk);
        let per = out.len() / chunk.len();
        for k in 0..chunk.len() {
            let o = &out.data()[k * per..(k + 1) * per];
            let e_cf = pixel_mse(o, &target.data()[k * per..(k + 1) * per]);
            let e_or = pixel_mse(o, &x.data()[k * per..(k + 1) * per]);
            se_cf += e_cf * per as f64;
            se_orig += e_or * per as f64;
            closer += usize::from(e_cf < e_or);
            count += per;
        }
    }
    Ok(CounterfactualResult {
        attr_index,
        pairs: pairs.len(),
        rmse_counterfactual: (se_cf / count as f64).sqrt(),
        rmse_original: (se_orig / count as f64).sqrt(),
        closer_fraction: closer as f64 / pairs.len() as f64,
    })
}

/// One decode per `α`, other attributes held at their binary `labels`.
/// `image` is `[C, H, W]`; output order follows `alphas`.
pub fn interpolation_strip(
    model: &FaderModel<f32>,
    image: &Tensor<f32>,
    labels: &[u8],
    attr_index: usize,
    alphas: &[f64],
) -> Result<Vec<Tensor<f32>>> {
    check_attr(model, attr_index)?;
    if labels.len() != model.config.n_attributes {
        return Err(FaderError::Shape(format!(
            "{} labels for {} attributes",
            labels.len(),
            model.config.n_attributes
        )));
    }
    let codes = alphas
        .iter()
        .map(|&a| {
            let mut v: Vec<f64> = labels.iter().map(|&b| f64::from(b)).collect();
            v[attr_index] = a;
            AttributeCode::from_alphas(&v, model.config.code_range())
        })
        .collect::<Result<Vec<_>>>()?;
    strip_from_codes(model, image, &codes)
}

/// Encodes `image` once and decodes it under each code, one decode per code.
pub fn strip_from_codes(model: &FaderModel<f32>, image: &Tensor<f32>, codes: &[AttributeCode]) -> Result<Vec<Tensor<f32>>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let z = model.encode(&Tensor::from_vec(&shape, image.data().to_vec())?)?;
    codes
        .iter()
        .map(|code| {
            let out = model.decode(&z, std::slice::from_ref(code))?;
            Tensor::from_vec(image.shape(), out.into_data())
        })
        .collect()
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityResult {
    pub attr_index: usize,
    pub alphas: Vec<f64>,
    /// Spearman correlation between `α` and the probe's confidence, per image.
    pub rho: Vec<f64>,
    /// Fraction of images with `rho >= min_rho`.
    pub fraction: f64,
    pub min_rho: f64,
}

/// How consistently the probe's confidence for `attr_index` rises along an `α` sweep.
pub fn strip_monotonicity(
    model: &FaderModel<f32>,
    probe: &ProbeClassifier,
    split: &Split,
    attr_index: usize,
    alphas: &[f64],
    min_rho: f64,
) -> Result<MonotonicityResult> {
    check_attr(model, attr_index)?;
    let n = model.config.n_attributes;
    let mut rho = Vec::with_capacity(split.len());
    for i in 0..split.len() {
        let strip = interpolation_strip(model, &split.image(i), split.labels_of(i), attr_index, alphas)?;
        let [c, h, w] = [split.channels, split.height, split.width];
        let data: Vec<f32> = strip.iter().flat_map(|t| t.data().iter().copied()).collect();
        let probs = probe.predict_proba(&Tensor::from_vec(&[strip.len(), c, h, w], data)?)?;
        let conf: Vec<f64> = (0..strip.len()).map(|k| f64::from(probs.data()[k * n + attr_index])).collect();
        rho.push(spearman(alphas, &conf));
    }
    let hits = rho.iter().filter(|&&r| r >= min_rho).count();
    Ok(MonotonicityResult {
        attr_index,
        alphas: alphas.to_vec(),
        fraction: hits as f64 / rho.len().max(1) as f64,
        rho,
        min_rho,
    })
}

/// `k` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub mse: f64,
    pub mean_swap_accuracy: f64,
}

fn dominates(a: &Candidate, b: &Candidate) -> bool {
    a.mse <= b.mse
        && a.mean_swap_accuracy >= b.mean_swap_accuracy
        && (a.mse < b.mse || a.mean_swap_accuracy > b.mean_swap_accuracy)
}

/// Orders candidates by Pareto front on (low MSE, high swap accuracy); within a
/// front, by swap accuracy, then MSE.
pub fn select_model(candidates: &[Candidate]) -> Vec<Candidate> {
    let mut rest: Vec<Candidate> = candidates.to_vec();
    let mut ranked = Vec::with_capacity(rest.len());
    while !rest.is_empty() {
        let (mut front, others): (Vec<_>, Vec<_>) = rest
            .iter()
            .cloned()
            .partition(|c| !rest.iter().any(|o| dominates(o, c)));
        front.sort_by(|a, b| {
            b.mean_swap_accuracy
                .total_cmp(&a.mean_swap_accuracy)
                .then(a.mse.total_cmp(&b.mse))
        });
        ranked.extend(front);
        rest = others;
    }
    ranked
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub step: u64,
    pub split: String,
    pub attribute_names: Vec<String>,
    pub recon_mse: f64,
    pub recon_rmse: f64,
    pub swap_accuracy: Vec<f64>,
    pub swap_kept_accuracy: Vec<f64>,
    pub joint_swap_all_flipped: f64,
    pub invariance_accuracy: f64,
    pub invariance_per_attribute: Vec<f64>,
    pub counterfactual_rmse: Vec<f64>,
    pub counterfactual_rmse_original: Vec<f64>,
    pub counterfactual_closer_fraction: Vec<f64>,
    pub probe_held_out_accuracy: Vec<f64>,
}

pub const SUMMARY_HEADER: [&str; 7] = [
    "checkpoint",
    "step",
    "recon_mse",
    "recon_rmse",
    "mean_swap_accuracy",
    "invariance_accuracy",
    "rank",
];

impl EvalReport {
    pub fn mean_swap_accuracy(&self) -> f64 {
        self.swap_accuracy.iter().sum::<f64>() / self.swap_accuracy.len().max(1) as f64
    }

    pub fn candidate(&self) -> Candidate {
        Candidate {
            id: self.checkpoint.clone(),
            mse: self.recon_mse,
            mean_swap_accuracy: self.mean_swap_accuracy(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report is plain data")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| FaderError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FaderError::io(path, e))?;
        toml::from_str(&text).map_err(|e| FaderError::Config(format!("{}: {e}", path.display())))
    }
}

/// Summary table across reports, ranked with [`select_model`].
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let ranked = select_model(&reports.iter().map(EvalReport::candidate).collect::<Vec<_>>());
    let mut out = SUMMARY_HEADER.join(",");
    out.push('\n');
    for r in reports {
        let rank = ranked.iter().position(|c| c.id == r.checkpoint).map_or(0, |p| p + 1);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.checkpoint,
            r.step,
            r.recon_mse,
            r.recon_rmse,
            r.mean_swap_accuracy(),
            r.invariance_accuracy,
            rank
        );
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub invariance: InvarianceConfig,
    /// Skip the invariance probe (reported as NaN).
    pub skip_invariance: bool,
}

/// Every metric for one checkpoint on `split` (`"valid"` or `"test"`).
pub fn evaluate(
    model: &FaderModel<f32>,
    checkpoint: &str,
    step: u64,
    dataset: &crate::dataset::Dataset,
    split_name: &str,
    probe: &ProbeClassifier,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let split = dataset.split(split_name)?;
    let cf = dataset.counterfactuals(split_name)?;
    let n = model.config.n_attributes;
    let recon = reconstruction_error(model, split)?;
    let swaps = (0..n)
        .map(|k| swap_accuracy(model, probe, split, k))
        .collect::<Result<Vec<_>>>()?;
    let joint = joint_swap_accuracy(model, probe, split)?;
    let inv = if options.skip_invariance {
        None
    } else {
        Some(invariance_probe(model, &dataset.train, split, &options.invariance)?)
    };
    let cfs = (0..n)
        .map(|k| counterfactual_error(model, split, cf, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        checkpoint: checkpoint.to_string(),
        step,
        split: split_name.to_string(),
        attribute_names: dataset.manifest.attribute_names.clone(),
        recon_mse: recon.mse,
        recon_rmse: recon.rmse,
        swap_accuracy: swaps.iter().map(|s| s.accuracy).collect(),
        swap_kept_accuracy: swaps
            .iter()
            .map(|s| s.kept_accuracy.iter().sum::<f64>() / s.kept_accuracy.len().max(1) as f64)
            .collect(),
        joint_swap_all_flipped: joint.all_flipped,
        invariance_accuracy: inv.as_ref().map_or(f64::NAN, |i| i.accuracy),
        invariance_per_attribute: inv.map_or_else(Vec::new, |i| i.per_attribute),
        counterfactual_rmse: cfs.iter().map(|c| c.rmse_counterfactual).collect(),
        counterfactual_rmse_original: cfs.iter().map(|c| c.rmse_original).collect(),
        counterfactual_closer_fraction: cfs.iter().map(|c| c.closer_fraction).collect(),
        probe_held_out_accuracy: probe.meta.held_out_accuracy.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]), 1.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]), 0.0);
        // ranks of y: 1, 2.5, 2.5, 4
        let r = spearman(&x, &[0.1, 0.5, 0.5, 0.9]);
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn linspace_matches_strip_grid() {
        assert_eq!(linspace(-1.0, 2.0, 7), vec![-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    fn c(id: &str, mse: f64, swap: f64) -> Candidate {
        Candidate {
            id: id.into(),
            mse,
            mean_swap_accuracy: swap,
        }
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_model(&[c("a", 1.0, 0.5)])[0].id, "a");
        let r = select_model(&[c("b", 0.2, 0.6), c("a", 0.1, 0.9)]);
        assert_eq!(r[0].id, "a");
        // a better swap, b better mse: both non-dominated, swap wins
        let r = select_model(&[c("b", 0.1, 0.8), c("a", 0.2, 0.9)]);
        assert_eq!(r[0].id, "a");
        let r = select_model(&[c("x", 0.5, 0.5), c("b", 0.1, 0.8), c("a", 0.2, 0.9)]);
        assert_eq!(r.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["a", "b", "x"]);
    }

    #[test]
    fn majority_rates() {
        assert_eq!(majority_rate(&[1, 0, 1, 1, 0, 1], 2), vec![2.0 / 3.0, 2.0 / 3.0]);
    }
}
