//! Command-line pipeline and HTTP edit service.

pub mod commands;
pub mod config;
pub mod service;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fader_core::Result;

use crate::config::RunConfig;

/// Lines framing the resolved configuration printed before every command.
pub const CONFIG_BEGIN: &str = "# resolved configuration";
pub const CONFIG_END: &str = "# end of configuration";

#[derive(Debug, Parser)]
#[command(name = "fader", version, about = "Train and serve latent-adversarial attribute editors")]
pub struct Cli {
    /// TOML file with [dataset], [model], [train], [probe], [eval], [generate], [serve] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite non-empty output directories.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the sprite dataset into <out>/data.
    Dataset(DatasetArgs),
    /// Train into <out>/run.
    Train(TrainArgs),
    /// Evaluate checkpoints into <out>/eval.
    Eval(EvalArgs),
    /// Write interpolation strips and joint-swap grids into <out>/generate.
    Generate(GenerateArgs),
    /// Start the HTTP edit service.
    Serve(ServeArgs),
}

#[derive(Debug, Default, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub n_attributes: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub valid: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct EvalArgs {
    /// Evaluate every checkpoint and rank them.
    #[arg(long)]
    pub checkpoint_all: bool,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub skip_invariance: bool,
}

#[derive(Debug, Default, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub attr: Option<usize>,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub alphas: Option<Vec<f64>>,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Default, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub cors_origin: Option<String>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Cli {
    /// Defaults, then the config file, then flags.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, self.seed);
        set(&mut c.out, self.out.clone());
        match &self.command {
            Command::Dataset(a) => {
                set(&mut c.dataset.image_size, a.image_size);
                set(&mut c.dataset.n_attributes, a.n_attributes);
                set(&mut c.dataset.train, a.train);
                set(&mut c.dataset.valid, a.valid);
                set(&mut c.dataset.test, a.test);
            }
            Command::Train(a) => {
                set(&mut c.train.total_steps, a.steps);
                set(&mut c.train.lambda_max, a.lambda_max);
                if a.warmup_steps.is_some() {
                    c.train.warmup_steps = a.warmup_steps;
                }
                set(&mut c.train.batch_size, a.batch_size);
                set(&mut c.train.checkpoint_every, a.checkpoint_every);
                set(&mut c.train.log_every, a.log_every);
            }
            Command::Eval(a) => {
                c.eval.checkpoint_all |= a.checkpoint_all;
                c.eval.skip_invariance |= a.skip_invariance;
                set(&mut c.eval.split, a.split.clone());
            }
            Command::Generate(a) => {
                set(&mut c.generate.images, a.images);
                set(&mut c.generate.attr_index, a.attr);
                set(&mut c.generate.alphas, a.alphas.clone());
                set(&mut c.generate.split, a.split.clone());
            }
            Command::Serve(a) => {
                set(&mut c.serve.host, a.host.clone());
                set(&mut c.serve.port, a.port);
                if a.checkpoint.is_some() {
                    c.serve.checkpoint = a.checkpoint.clone();
                }
                set(&mut c.serve.cors_origin, a.cors_origin.clone());
            }
        }
        let c = c.resolve();
        c.validate()?;
        Ok(c)
    }

    pub fn run(&self) -> Result<()> {
        let cfg = self.resolve_config()?;
        println!("{CONFIG_BEGIN}\n{}{CONFIG_END}", cfg.to_toml());
        match &self.command {
            Command::Dataset(_) => commands::dataset(&cfg, self.force),
            Command::Train(_) => commands::train(&cfg, self.force),
            Command::Eval(_) => commands::eval(&cfg).map(|_| ()),
            Command::Generate(_) => commands::generate(&cfg),
            Command::Serve(_) => commands::serve(&cfg),
        }
    }
}
