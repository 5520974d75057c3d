//! Run configuration: defaults, overridden by a TOML file, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use fader_core::dataset::DatasetParams;
use fader_core::evaluation::InvarianceConfig;
use fader_core::probe::ProbeConfig;
use fader_core::{FaderError, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every module derives its own stream from it.
    pub seed: u64,
    /// Experiment directory holding `data/`, `run/`, `eval/`, `generate/` and `probe.ckpt`.
    pub out: PathBuf,
    pub dataset: DatasetParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub eval: EvalSection,
    pub generate: GenerateSection,
    pub serve: ServeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("fader-out"),
            dataset: DatasetParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalSection::default(),
            generate: GenerateSection::default(),
            serve: ServeSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    /// Evaluate every `ckpt_<step>` instead of only the latest.
    pub checkpoint_all: bool,
    pub skip_invariance: bool,
    pub invariance: InvarianceConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: "test".into(),
            checkpoint_all: false,
            skip_invariance: false,
            invariance: InvarianceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub split: String,
    /// Number of split images, taken from the start of the split.
    pub images: usize,
    pub attr_index: usize,
    /// Sweep values; when empty, `sweep_points` evenly spaced values across the code range.
    pub alphas: Vec<f64>,
    pub sweep_points: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            split: "test".into(),
            images: 4,
            attr_index: 0,
            alphas: Vec::new(),
            sweep_points: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
    /// Checkpoint file or run directory; defaults to `<out>/run`.
    pub checkpoint: Option<PathBuf>,
    /// Allowed CORS origin, `*` for any.
    pub cors_origin: String,
    pub body_limit: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint: None,
            cors_origin: "*".into(),
            body_limit: 2 * 1024 * 1024,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FaderError::Config(e.message().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FaderError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| FaderError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    /// Copies shared values into the sections that use them.
    pub fn resolve(mut self) -> Self {
        self.train.seed = self.seed;
        self.eval.invariance.seed = self.seed;
        self.model.image_size = self.dataset.image_size;
        self.model.n_attributes = self.dataset.n_attributes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join("run")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn generate_dir(&self) -> PathBuf {
        self.out.join("generate")
    }

    pub fn probe_path(&self) -> PathBuf {
        self.out.join("probe.ckpt")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.serve.checkpoint.clone().unwrap_or_else(|| self.run_dir())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("colour = 1").is_err());
        let e = RunConfig::from_toml("[train]\nlamda_max = 0.1").unwrap_err();
        assert!(e.to_string().contains("lamda_max"), "{e}");
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[train]\nlambda_max = 0.1").unwrap().resolve();
        assert_eq!(c.train.lambda_max, 0.1);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.seed, 3);
    }
}
