//! Sprite dataset generation and the on-disk format.
//!
//! Directory layout:
//!
//! ```text
//! manifest.toml
//! train.images  train.labels
//! valid.images  valid.labels  valid.cf.images  valid.cf.pairs
//! test.images   test.labels   test.cf.images   test.cf.pairs
//! ```
//!
//! `*.images` files start with a 24-byte header (`b"FADRIMG1"`, then little-endian
//! `u32` count, height, width, channels) followed by `count` images stored as
//! `height × width × channels` unsigned bytes. A byte `b` maps to `b / 127.5 - 1`.
//! `*.labels` are CSV with a header `index,<attr>...` and one 0/1 column per
//! attribute. `*.cf.pairs` are CSV `cf_index,original_index,attr_index`, one row
//! per image of the matching `*.cf.images` file.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FaderError, Result};
use crate::seed::{derive_seed, stream};
use crate::synth::{self, SpriteSpec, ATTRIBUTE_NAMES, CHANNELS, MAX_ATTRIBUTES};
use crate::tensor::{Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const IMAGE_MAGIC: &[u8; 8] = b"FADRIMG1";
const HEADER_LEN: usize = 24;
/// Largest allowed deviation of an attribute's positive rate from 1/2 within a split.
pub const BALANCE_TOLERANCE: f64 = 0.02;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub image_size: usize,
    pub n_attributes: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_attributes: 2,
            train: 8000,
            valid: 1000,
            test: 1000,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(FaderError::Config(format!(
                "image size must be a power of two and at least 16, got {}",
                self.image_size
            )));
        }
        if self.n_attributes == 0 || self.n_attributes > MAX_ATTRIBUTES {
            return Err(FaderError::Config(format!(
                "sprites support 1 to {MAX_ATTRIBUTES} attributes, got {}",
                self.n_attributes
            )));
        }
        Ok(())
    }

    fn split_sizes(&self) -> [usize; 3] {
        [self.train, self.valid, self.test]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: String,
    pub seed: u64,
    pub n_attributes: usize,
    pub attribute_names: Vec<String>,
    /// `[channels, height, width]`
    pub image_size: [usize; 3],
    pub splits: SplitSizes,
    pub total: usize,
    pub counterfactual_splits: Vec<String>,
}

impl DatasetManifest {
    pub fn split_len(&self, name: &str) -> Option<usize> {
        match name {
            "train" => Some(self.splits.train),
            "valid" => Some(self.splits.valid),
            "test" => Some(self.splits.test),
            _ => None,
        }
    }
}

/// Images of one split, quantized to bytes, with their attribute labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_attributes: usize,
    /// `len × H × W × C` bytes.
    pub pixels: Vec<u8>,
    /// `len × n_attributes` bits.
    pub labels: Vec<u8>,
}

pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    f32::from(b) / 127.5 - 1.0
}

impl Split {
    pub fn empty(height: usize, width: usize, channels: usize, n_attributes: usize) -> Self {
        Self {
            height,
            width,
            channels,
            n_attributes,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_bytes().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image_bytes(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Appends a `[C, H, W]` image in `[-1, 1]`.
    pub fn push(&mut self, image: &Tensor<f32>, labels: &[u8]) {
        let (h, w, c) = (self.height, self.width, self.channels);
        assert_eq!(image.shape(), &[c, h, w]);
        assert_eq!(labels.len(), self.n_attributes);
        let d = image.data();
        self.pixels.reserve(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    self.pixels.push(to_byte(d[(ch * h + y) * w + x]));
                }
            }
        }
        self.labels.extend_from_slice(labels);
    }

    pub fn labels_of(&self, i: usize) -> &[u8] {
        &self.labels[i * self.n_attributes..(i + 1) * self.n_attributes]
    }

    /// Writes image `i` as `[C, H, W]` values in `[-1, 1]` into `out`.
    pub fn decode_into<T: Real>(&self, i: usize, out: &mut [T]) {
        let (h, w, c) = (self.height, self.width, self.channels);
        let src = &self.pixels[i * self.image_bytes()..(i + 1) * self.image_bytes()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = T::lit(f64::from(from_byte(src[(y * w + x) * c + ch])));
                }
            }
        }
    }

    pub fn image<T: Real>(&self, i: usize) -> Tensor<T> {
        let mut data = vec![T::zero(); self.image_bytes()];
        self.decode_into(i, &mut data);
        Tensor::from_vec(&[self.channels, self.height, self.width], data).expect("image size")
    }

    /// `[N, C, H, W]` batch of the given indices.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let per = self.image_bytes();
        let mut data = vec![T::zero(); indices.len() * per];
        for (k, &i) in indices.iter().enumerate() {
            self.decode_into(i, &mut data[k * per..(k + 1) * per]);
        }
        Tensor::from_vec(&[indices.len(), self.channels, self.height, self.width], data).expect("batch size")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().flat_map(|&i| self.labels_of(i).iter().copied()).collect()
    }

    pub fn write_images(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.pixels.len());
        buf.extend_from_slice(IMAGE_MAGIC);
        for v in [self.len(), self.height, self.width, self.channels] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.pixels);
        fs::write(path, buf).map_err(|e| FaderError::io(path, e))
    }

    pub fn write_labels(&self, path: &Path, names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["index".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![i.to_string()];
            row.extend(self.labels_of(i).iter().map(u8::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| FaderError::io(path, e))?;
        Ok(())
    }

    /// Reads an images container; labels are left empty.
    pub fn read_images(path: &Path, n_attributes: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FaderError::io(path, e))?;
        if bytes.len() < HEADER_LEN || &bytes[..8] != IMAGE_MAGIC {
            return Err(FaderError::Dataset(format!("{}: not an images container", path.display())));
        }
        let field = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
        let (count, height, width, channels) = (field(0), field(1), field(2), field(3));
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * height * width * channels {
            return Err(FaderError::Dataset(format!(
                "{}: header announces {count} images of {height}x{width}x{channels}, body has {} bytes",
                path.display(),
                body.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            n_attributes,
            pixels: body.to_vec(),
            labels: Vec::new(),
        })
    }

    pub fn read_labels(path: &Path, n_attributes: usize) -> Result<Vec<u8>> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() != n_attributes + 1 || &header[0] != "index" {
            return Err(FaderError::Dataset(format!(
                "{}: expected columns index + {n_attributes} attributes",
                path.display()
            )));
        }
        let mut out = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec[0].parse::<usize>().ok() != Some(i) {
                return Err(FaderError::Dataset(format!("{}: row {i} has index {}", path.display(), &rec[0])));
            }
            for v in rec.iter().skip(1) {
                match v {
                    "0" => out.push(0),
                    "1" => out.push(1),
                    other => {
                        return Err(FaderError::Dataset(format!("{}: label {other:?} is not 0/1", path.display())))
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterfactualPair {
    pub original_index: usize,
    pub attr_index: usize,
}

/// Ground-truth counterfactual renders; image `i` is the original
/// `pairs[i].original_index` with attribute `pairs[i].attr_index` flipped.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualSet {
    pub images: Split,
    pub pairs: Vec<CounterfactualPair>,
}

impl CounterfactualSet {
    pub fn indices_for(&self, attr_index: usize) -> Vec<usize> {
        (0..self.pairs.len())
            .filter(|&i| self.pairs[i].attr_index == attr_index)
            .collect()
    }

    fn write(&self, dir: &Path, split: &str) -> Result<()> {
        self.images.write_images(&dir.join(format!("{split}.cf.images")))?;
        let path = dir.join(format!("{split}.cf.pairs"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["cf_index", "original_index", "attr_index"])?;
        for (i, p) in self.pairs.iter().enumerate() {
            w.write_record([i.to_string(), p.original_index.to_string(), p.attr_index.to_string()])?;
        }
        w.flush().map_err(|e| FaderError::io(&path, e))?;
        Ok(())
    }

    fn read(dir: &Path, split: &str, originals: &Split) -> Result<Self> {
        let mut images = Split::read_images(&dir.join(format!("{split}.cf.images")), originals.n_attributes)?;
        let path = dir.join(format!("{split}.cf.pairs"));
        let mut r = csv::Reader::from_path(&path)?;
        let mut pairs = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| {
                rec.get(k)
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| FaderError::Dataset(format!("{}: bad row {i}", path.display())))
            };
            if parse(0)? != i {
                return Err(FaderError::Dataset(format!("{}: row {i} out of order", path.display())));
            }
            let pair = CounterfactualPair {
                original_index: parse(1)?,
                attr_index: parse(2)?,
            };
            if pair.original_index >= originals.len() || pair.attr_index >= originals.n_attributes {
                return Err(FaderError::Dataset(format!("{}: row {i} out of range", path.display())));
            }
            pairs.push(pair);
        }
        if pairs.len() != images.len() {
            return Err(FaderError::Dataset(format!(
                "{split}: {} counterfactual images but {} pairs",
                images.len(),
                pairs.len()
            )));
        }
        images.labels = pairs
            .iter()
            .flat_map(|p| {
                let mut l = originals.labels_of(p.original_index).to_vec();
                l[p.attr_index] ^= 1;
                l
            })
            .collect();
        Ok(Self { images, pairs })
    }
}

/// A fully loaded dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
    pub valid_cf: CounterfactualSet,
    pub test_cf: CounterfactualSet,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(FaderError::Dataset(format!("unknown split {other:?}"))),
        }
    }

    pub fn counterfactuals(&self, name: &str) -> Result<&CounterfactualSet> {
        match name {
            "valid" => Ok(&self.valid_cf),
            "test" => Ok(&self.test_cf),
            other => Err(FaderError::Dataset(format!("no counterfactual set for split {other:?}"))),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.toml");
        let text = fs::read_to_string(&mpath).map_err(|e| FaderError::io(&mpath, e))?;
        let manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| FaderError::Dataset(format!("{}: {e}", mpath.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(FaderError::Dataset(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }
        let n = manifest.n_attributes;
        let load_split = |name: &str| -> Result<Split> {
            let mut s = Split::read_images(&dir.join(format!("{name}.images")), n)?;
            s.labels = Split::read_labels(&dir.join(format!("{name}.labels")), n)?;
            let [c, h, w] = manifest.image_size;
            if (s.channels, s.height, s.width) != (c, h, w) {
                return Err(FaderError::Dataset(format!("{name}: image size differs from manifest")));
            }
            if Some(s.len()) != manifest.split_len(name) || s.labels.len() != s.len() * n {
                return Err(FaderError::Dataset(format!("{name}: size differs from manifest")));
            }
            Ok(s)
        };
        let train = load_split("train")?;
        let valid = load_split("valid")?;
        let test = load_split("test")?;
        let valid_cf = CounterfactualSet::read(dir, "valid", &valid)?;
        let test_cf = CounterfactualSet::read(dir, "test", &test)?;
        Ok(Self {
            manifest,
            train,
            valid,
            test,
            valid_cf,
            test_cf,
        })
    }
}

/// Sprite specs and labels of one split, before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpecs {
    pub specs: Vec<SpriteSpec>,
    pub labels: Vec<Vec<u8>>,
}

/// Balanced label assignment: every attribute combination appears
/// `len / 2^n` times (± 1), in a seed-determined order.
fn balanced_labels(len: usize, n: usize, seed: u64, split: &str) -> Result<Vec<Vec<u8>>> {
    let combos = 1usize << n;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, &format!("sprites.labels.{split}")));
    let labels: Vec<Vec<u8>> = order
        .iter()
        .map(|&k| (0..n).map(|a| ((k % combos) >> a & 1) as u8).collect())
        .collect();
    for a in 0..n {
        let ones = labels.iter().filter(|l| l[a] == 1).count();
        let rate = if len == 0 { 0.0 } else { ones as f64 / len as f64 };
        if (rate - 0.5).abs() > BALANCE_TOLERANCE {
            return Err(FaderError::Dataset(format!(
                "split {split} of size {len} cannot balance attribute {a} within ±{BALANCE_TOLERANCE} (rate {rate:.3})"
            )));
        }
    }
    Ok(labels)
}

fn image_rng(seed: u64, split_index: usize, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sprites.nuisance"));
    rng.set_stream(((split_index as u64) << 40) | i as u64);
    rng
}

/// Samples specs for every split. Pure function of `(params, seed)`.
pub fn sample_specs(params: &DatasetParams, seed: u64) -> Result<Vec<SplitSpecs>> {
    params.validate()?;
    SPLITS
        .iter()
        .zip(params.split_sizes())
        .enumerate()
        .map(|(si, (name, len))| {
            let labels = balanced_labels(len, params.n_attributes, seed, name)?;
            let specs = labels
                .iter()
                .enumerate()
                .map(|(i, l)| synth::sample_spec(&mut image_rng(seed, si, i), l, params.image_size))
                .collect();
            Ok(SplitSpecs { specs, labels })
        })
        .collect()
}

pub fn render_split(specs: &SplitSpecs, side: usize, n_attributes: usize) -> Result<Split> {
    let mut split = Split::empty(side, side, CHANNELS, n_attributes);
    for (s, l) in specs.specs.iter().zip(&specs.labels) {
        split.push(&synth::render_sprite(s, side, side)?, l);
    }
    Ok(split)
}

/// Renders every attribute flip of every spec.
pub fn render_counterfactuals(specs: &SplitSpecs, side: usize, n_attributes: usize) -> Result<CounterfactualSet> {
    let mut images = Split::empty(side, side, CHANNELS, n_attributes);
    let mut pairs = Vec::with_capacity(specs.specs.len() * n_attributes);
    for (i, (s, l)) in specs.specs.iter().zip(&specs.labels).enumerate() {
        for a in 0..n_attributes {
            let cf = synth::counterfactual(s, a, n_attributes)?;
            let mut label = l.clone();
            label[a] ^= 1;
            images.push(&synth::render_sprite(&cf, side, side)?, &label);
            pairs.push(CounterfactualPair {
                original_index: i,
                attr_index: a,
            });
        }
    }
    Ok(CounterfactualSet { images, pairs })
}

/// Generates a dataset in memory.
pub fn generate(params: &DatasetParams, seed: u64) -> Result<Dataset> {
    let specs = sample_specs(params, seed)?;
    let side = params.image_size;
    let n = params.n_attributes;
    let train = render_split(&specs[0], side, n)?;
    let valid = render_split(&specs[1], side, n)?;
    let test = render_split(&specs[2], side, n)?;
    let valid_cf = render_counterfactuals(&specs[1], side, n)?;
    let test_cf = render_counterfactuals(&specs[2], side, n)?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        generator: "sprites".into(),
        seed,
        n_attributes: n,
        attribute_names: ATTRIBUTE_NAMES[..n].iter().map(|s| s.to_string()).collect(),
        image_size: [CHANNELS, side, side],
        splits: SplitSizes {
            train: params.train,
            valid: params.valid,
            test: params.test,
        },
        total: params.train + params.valid + params.test,
        counterfactual_splits: vec!["valid".into(), "test".into()],
    };
    Ok(Dataset {
        manifest,
        train,
        valid,
        test,
        valid_cf,
        test_cf,
    })
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FaderError::io(dir, e))?;
        let names = &self.manifest.attribute_names;
        for (name, split) in SPLITS.iter().zip([&self.train, &self.valid, &self.test]) {
            split.write_images(&dir.join(format!("{name}.images")))?;
            split.write_labels(&dir.join(format!("{name}.labels")), names)?;
        }
        self.valid_cf.write(dir, "valid")?;
        self.test_cf.write(dir, "test")?;
        let text = toml::to_string_pretty(&self.manifest).map_err(|e| FaderError::Dataset(e.to_string()))?;
        let mpath = dir.join("manifest.toml");
        let mut f = fs::File::create(&mpath).map_err(|e| FaderError::io(&mpath, e))?;
        writeln!(f, "# sprite dataset; images are HxWxC bytes, value = byte / 127.5 - 1")
            .and_then(|_| f.write_all(text.as_bytes()))
            .map_err(|e| FaderError::io(&mpath, e))?;
        Ok(())
    }
}

/// Generates and writes a dataset; returns its manifest.
pub fn sample_dataset(params: &DatasetParams, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let ds = generate(params, seed)?;
    ds.save(dir)?;
    Ok(ds.manifest)
}
