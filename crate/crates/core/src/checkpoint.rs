//! Checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic b"FADRCKPT"
//! 8       4     container version (u32 LE)
//! 12      4     header length H (u32 LE)
//! 16      H     UTF-8 JSON header
//! 16+H    ...   tensor payload, little-endian f32
//! ```
//!
//! The header carries the metadata (kind, model config, step, `λ_E` schedule,
//! attribute names, optimizer and RNG state) and a `tensors` table of
//! `{name, shape, offset}` entries; `offset` counts f32 values from the
//! start of the payload.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FaderError, Result};
use crate::model::{FaderModel, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{TrainConfig, TrainRngs, TrainState};

pub const MAGIC: &[u8; 8] = b"FADRCKPT";
pub const CONTAINER_VERSION: u32 = 1;
pub const LATEST_MARKER: &str = "ckpt_latest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal word position (u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || FaderError::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, k) in key.iter_mut().enumerate() {
            *k = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub train_config: TrainConfig,
    pub warmup_steps: u64,
    pub lambda_max: f64,
    pub adam: AdamConfig,
    pub dis_optimizer_step: u64,
    pub ae_optimizer_step: u64,
    pub rng_dropout: RngState,
    pub rng_augment: RngState,
    pub rng_shuffle: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// `"fader"` or `"probe"`.
    pub kind: String,
    pub model_config: serde_json::Value,
    pub step: u64,
    pub attribute_names: Vec<String>,
    #[serde(default)]
    pub training: Option<TrainingMeta>,
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `header` (its tensor table is filled in here) and the tensors.
pub fn write_container(path: &Path, mut header: Header, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut offset = 0;
    header.tensors = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let json = serde_json::to_vec(&header).map_err(|e| FaderError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| FaderError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| FaderError::io(path, e))
}

pub fn parse_container(bytes: &[u8]) -> Result<(Header, HashMap<String, Tensor<f32>>)> {
    let bad = |m: &str| FaderError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint container"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(FaderError::Checkpoint(format!("unsupported container version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| FaderError::Checkpoint(e.to_string()))?;
    let payload = &bytes[16 + hlen..];
    let mut tensors = HashMap::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let len: usize = e.shape.iter().product();
        let raw = payload
            .get(4 * e.offset..4 * (e.offset + len))
            .ok_or_else(|| FaderError::Checkpoint(format!("tensor {} runs past the payload", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
    }
    Ok((header, tensors))
}

pub fn read_container(path: &Path) -> Result<(Header, HashMap<String, Tensor<f32>>)> {
    let bytes = fs::read(path).map_err(|e| FaderError::io(path, e))?;
    parse_container(&bytes).map_err(|e| FaderError::Checkpoint(format!("{}: {e}", path.display())))
}

fn named<'a>(prefix: &str, store: &'a ParamStore<f32>) -> impl Iterator<Item = (String, &'a Tensor<f32>)> + 'a {
    let prefix = prefix.to_string();
    store.iter().map(move |(n, t)| (format!("{prefix}{n}"), t))
}

fn model_tensors(model: &FaderModel<f32>) -> Vec<(String, &Tensor<f32>)> {
    model.stores().into_iter().flat_map(|(p, s)| named(p, s)).collect()
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}")
}

/// Writes `ckpt_<step>` into `dir` and points `ckpt_latest` at it.
pub fn save_train_state(
    dir: &Path,
    state: &TrainState<f32>,
    config: &TrainConfig,
    attribute_names: &[String],
) -> Result<PathBuf> {
    let mut tensors = model_tensors(&state.model);
    for (k, m) in state.dis_optimizer.moments.iter().enumerate() {
        tensors.extend(named(&format!("optim.dis.{k}.first."), &m.first));
        tensors.extend(named(&format!("optim.dis.{k}.second."), &m.second));
    }
    for (k, m) in state.ae_optimizer.moments.iter().enumerate() {
        tensors.extend(named(&format!("optim.ae.{k}.first."), &m.first));
        tensors.extend(named(&format!("optim.ae.{k}.second."), &m.second));
    }
    let header = Header {
        format_version: CONTAINER_VERSION,
        kind: "fader".into(),
        model_config: serde_json::to_value(&state.model.config).expect("serializable config"),
        step: state.step,
        attribute_names: attribute_names.to_vec(),
        training: Some(TrainingMeta {
            train_config: config.clone(),
            warmup_steps: config.warmup(),
            lambda_max: config.lambda_max,
            adam: config.adam(),
            dis_optimizer_step: state.dis_optimizer.step,
            ae_optimizer_step: state.ae_optimizer.step,
            rng_dropout: RngState::capture(&state.rngs.dropout),
            rng_augment: RngState::capture(&state.rngs.augment),
            rng_shuffle: RngState::capture(&state.rngs.shuffle),
        }),
        extra: serde_json::Value::Null,
        tensors: Vec::new(),
    };
    let name = checkpoint_name(state.step);
    let path = dir.join(&name);
    write_container(&path, header, &tensors)?;
    let marker = dir.join(LATEST_MARKER);
    fs::write(&marker, format!("{name}\n")).map_err(|e| FaderError::io(&marker, e))?;
    Ok(path)
}

/// A loaded model checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub model: FaderModel<f32>,
    pub path: PathBuf,
    tensors: HashMap<String, Tensor<f32>>,
}

/// Resolves a directory to the checkpoint named by its `ckpt_latest` marker.
pub fn resolve(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        let marker = path.join(LATEST_MARKER);
        let name = fs::read_to_string(&marker).map_err(|e| FaderError::io(&marker, e))?;
        Ok(path.join(name.trim()))
    } else {
        Ok(path.to_path_buf())
    }
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let path = resolve(path)?;
        let (header, tensors) = read_container(&path)?;
        Self::from_parts(header, tensors, path)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = parse_container(bytes)?;
        Self::from_parts(header, tensors, PathBuf::new())
    }

    fn from_parts(header: Header, tensors: HashMap<String, Tensor<f32>>, path: PathBuf) -> Result<Self> {
        if header.kind != "fader" {
            return Err(FaderError::Checkpoint(format!("expected a fader checkpoint, found {:?}", header.kind)));
        }
        let config: ModelConfig = serde_json::from_value(header.model_config.clone())
            .map_err(|e| FaderError::Checkpoint(format!("model config: {e}")))?;
        let mut model = FaderModel::<f32>::init(&config, 0)?;
        for (prefix, store) in model.stores_mut() {
            store.load_from(prefix, |name| tensors.get(name).cloned())?;
        }
        Ok(Self {
            header,
            model,
            path,
            tensors,
        })
    }

    pub fn step(&self) -> u64 {
        self.header.step
    }

    /// Rebuilds the full training state, including optimizer moments and RNG positions.
    pub fn train_state(&self) -> Result<TrainState<f32>> {
        let meta = self
            .header
            .training
            .as_ref()
            .ok_or_else(|| FaderError::Checkpoint("no training state stored".into()))?;
        let model = self.model.clone();
        let restore = |adam: AdamConfig, key: &str, groups: &[&ParamStore<f32>], step: u64| -> Result<Adam<f32>> {
            let mut opt = Adam::new(adam, groups);
            for (k, m) in opt.moments.iter_mut().enumerate() {
                m.first
                    .load_from(&format!("optim.{key}.{k}.first."), |n| self.tensors.get(n).cloned())?;
                m.second
                    .load_from(&format!("optim.{key}.{k}.second."), |n| self.tensors.get(n).cloned())?;
            }
            opt.step = step;
            Ok(opt)
        };
        let dis_optimizer = restore(meta.adam, "dis", &[&model.discriminator.params], meta.dis_optimizer_step)?;
        let ae_optimizer = restore(
            meta.adam,
            "ae",
            &[&model.encoder.params, &model.decoder.params],
            meta.ae_optimizer_step,
        )?;
        Ok(TrainState {
            model,
            dis_optimizer,
            ae_optimizer,
            step: self.header.step,
            rngs: TrainRngs {
                dropout: meta.rng_dropout.restore()?,
                augment: meta.rng_augment.restore()?,
                shuffle: meta.rng_shuffle.restore()?,
            },
        })
    }
}

/// Lists `ckpt_<step>` files in `dir`, ordered by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| FaderError::io(dir, e))? {
        let entry = entry.map_err(|e| FaderError::io(dir, e))?;
        let name = entry.file_name();
        let Some(step) = name.to_str().and_then(|n| n.strip_prefix("ckpt_")).and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        out.push((step, entry.path()));
    }
    out.sort();
    Ok(out)
}
