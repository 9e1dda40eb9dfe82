//! Run files and command-line overrides.
//!
//! A run file is a JSON document with two optional objects:
//!
//! ```json
//! { "network": { "variant": "dsnet", "depth": 26, "width": 0.25 },
//!   "train":   { "iterations": 8000, "seed": 1 } }
//! ```
//!
//! `network` follows [`NetworkConfig`] and `train` follows [`TrainConfig`];
//! unknown keys are rejected. Flags given on the command line win over the file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use dsnet::arch::Stem;
use dsnet::train::TrainConfig;
use dsnet::{DType, NetworkConfig, NormKind, NormSpec, Variant};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StemArg {
    Cifar,
    Imagenet,
}

impl From<StemArg> for Stem {
    fn from(s: StemArg) -> Self {
        match s {
            StemArg::Cifar => Stem::Cifar,
            StemArg::Imagenet => Stem::Imagenet,
        }
    }
}

/// Options describing the network, shared by every subcommand that builds one.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// JSON run file with optional `network` and `train` objects.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// resnet, resnet-dense, dsnet-a, dsnet or ds2net.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Depth preset: 26, 38, 50, 77 or 101.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Custom blocks per stage, e.g. `2,2`; overrides --depth.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<usize>>,
    /// Width multiplier (0.25, 0.5, 1.0 in the presets).
    #[arg(long)]
    pub width: Option<f64>,
    /// Bottleneck width of the first stage before the multiplier.
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Shortcut normalization: bn, gn, ln, in or none.
    #[arg(long)]
    pub norm: Option<NormKind>,
    /// Group count for --norm gn (default: largest divisor of the channels up to 32).
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long, value_enum)]
    pub stem: Option<StemArg>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Seed for initialization, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default)]
pub struct RunFile {
    pub network: Option<NetworkConfig>,
    pub train: Option<TrainConfig>,
}

impl RunFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let Value::Object(mut map) = serde_json::from_str::<Value>(text)? else {
            bail!("run file must be a JSON object");
        };
        let network = map.remove("network").map(serde_json::from_value).transpose()?;
        let train = map.remove("train").map(serde_json::from_value).transpose()?;
        if let Some(key) = map.keys().next() {
            bail!("unknown run-file key `{key}` (expected `network` and/or `train`)");
        }
        Ok(Self { network, train })
    }
}

impl ModelArgs {
    pub fn run_file(&self) -> Result<RunFile> {
        self.config.as_deref().map_or_else(|| Ok(RunFile::default()), RunFile::load)
    }

    /// Network from the run file (or `base`) with flag overrides applied.
    pub fn network(&self, file: &RunFile, base: NetworkConfig) -> Result<NetworkConfig> {
        let mut cfg = file.network.clone().unwrap_or(base);
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(d) = self.depth {
            cfg.depth = d;
            cfg.blocks = None;
        }
        if let Some(b) = &self.blocks {
            cfg.blocks = Some(b.clone());
        }
        if let Some(w) = self.width {
            cfg.width = w;
        }
        if let Some(b) = self.base_width {
            cfg.base_width = b;
        }
        if let Some(s) = self.stem {
            cfg.stem = s.into();
        }
        if let Some(c) = self.classes {
            cfg.classes = c;
        }
        if let Some(s) = self.input_size {
            cfg.input_size = Some(s);
        }
        if let Some(kind) = self.norm {
            cfg.shortcut_norm = NormSpec::new(kind);
        }
        if let Some(g) = self.groups {
            if cfg.shortcut_norm.kind != NormKind::Gn {
                bail!("--groups applies to group normalization only");
            }
            cfg.shortcut_norm.groups = Some(g);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Training-loop overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate milestones, e.g. `4000,6000`.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    #[arg(long)]
    pub log_interval: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Evaluate on at most this many validation images.
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<DType>,
    /// Disable random crop and flip.
    #[arg(long)]
    pub no_augment: bool,
    /// Use the 64k-iteration schedule (milestones 32k and 48k) as the base.
    #[arg(long)]
    pub full_schedule: bool,
}

impl TrainArgs {
    pub fn train(&self, file: &RunFile, seed: Option<u64>) -> Result<TrainConfig> {
        let mut cfg = match (&file.train, self.full_schedule) {
            (_, true) => TrainConfig::full_schedule(),
            (Some(t), false) => t.clone(),
            (None, false) => TrainConfig::default(),
        };
        if let Some(n) = self.iterations {
            cfg.iterations = n;
            if self.milestones.is_none() && cfg.milestones.iter().any(|&m| m >= n) {
                // keep the schedule shape: milestones at 1/2 and 3/4 of the run
                cfg.milestones = [n / 2, n * 3 / 4].into_iter().filter(|&m| m > 0).collect();
                cfg.milestones.dedup();
            }
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.base_lr = lr;
        }
        if let Some(m) = &self.milestones {
            cfg.milestones = m.clone();
        }
        if let Some(v) = self.log_interval {
            cfg.log_interval = v;
        }
        if let Some(v) = self.eval_interval {
            cfg.eval_interval = v;
        }
        if self.eval_samples.is_some() {
            cfg.eval_samples = self.eval_samples;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        if self.no_augment {
            cfg.augment = false;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_file_rejects_unknown_sections() {
        assert!(RunFile::parse(r#"{"netwrk": {}}"#).is_err());
        let f = RunFile::parse(r#"{"network": {"variant": "ds2net"}, "train": {"iterations": 10, "milestones": [5]}}"#).unwrap();
        assert_eq!(f.network.unwrap().variant, Variant::Ds2Net);
        assert_eq!(f.train.unwrap().iterations, 10);
    }

    #[test]
    fn flags_override_file() {
        let file = RunFile::parse(r#"{"network": {"variant": "resnet", "depth": 38}}"#).unwrap();
        let args = ModelArgs {
            variant: Some(Variant::DsNet),
            width: Some(0.5),
            ..Default::default()
        };
        let cfg = args.network(&file, NetworkConfig::new(Variant::Plain, 26, 1.0, Stem::Cifar, 10)).unwrap();
        assert_eq!((cfg.variant, cfg.depth, cfg.width), (Variant::DsNet, 38, 0.5));
    }

    #[test]
    fn shortened_runs_rescale_milestones() {
        let args = TrainArgs {
            iterations: Some(100),
            ..Default::default()
        };
        let cfg = args.train(&RunFile::default(), Some(4)).unwrap();
        assert_eq!(cfg.milestones, vec![50, 75]);
        assert_eq!(cfg.seed, 4);
    }
}
