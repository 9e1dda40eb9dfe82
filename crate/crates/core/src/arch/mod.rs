//! Network configurations and the bottleneck network builder.

mod network;

pub use network::{registry, BlockLayout, BnRef, ForwardStats, Init, Network, ParamCategory, ParamInfo, StageLayout};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{NormKind, NormSpec};
use crate::shortcut::{SourceKind, WeightInit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Identity shortcuts.
    #[serde(rename = "resnet")]
    ResNet,
    /// Unweighted, unnormalized sum of every preceding aggregation output.
    #[serde(rename = "resnet-dense")]
    ResNetDense,
    /// Dense weighted normalized shortcuts from raw block outputs.
    #[serde(rename = "dsnet-a")]
    DsNetA,
    /// Dense weighted normalized shortcuts from aggregation outputs.
    #[serde(rename = "dsnet")]
    DsNet,
    /// `DsNet` plus dense shortcuts into every bottleneck's 3x3 convolution.
    #[serde(rename = "ds2net")]
    Ds2Net,
    /// No shortcut after the stage-entry block; reference chain for tests.
    #[serde(rename = "plain")]
    Plain,
}

impl Variant {
    /// The five variants of the ablation grid.
    pub const ALL: [Variant; 5] = [
        Variant::ResNet,
        Variant::ResNetDense,
        Variant::DsNetA,
        Variant::DsNet,
        Variant::Ds2Net,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ResNet => "resnet",
            Variant::ResNetDense => "resnet-dense",
            Variant::DsNetA => "dsnet-a",
            Variant::DsNet => "dsnet",
            Variant::Ds2Net => "ds2net",
            Variant::Plain => "plain",
        }
    }

    /// Source kind of the outer dense shortcuts, if the variant has any.
    pub fn dense_sources(self) -> Option<SourceKind> {
        match self {
            Variant::DsNetA => Some(SourceKind::A),
            Variant::DsNet | Variant::Ds2Net => Some(SourceKind::B),
            _ => None,
        }
    }

    pub fn has_inner_shortcuts(self) -> bool {
        self == Variant::Ds2Net
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" => Ok(Variant::ResNet),
            "resnet-dense" | "resnet_dense" => Ok(Variant::ResNetDense),
            "dsnet-a" | "dsnet_a" => Ok(Variant::DsNetA),
            "dsnet" => Ok(Variant::DsNet),
            "ds2net" => Ok(Variant::Ds2Net),
            "plain" => Ok(Variant::Plain),
            other => Err(Error::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// 3x3 stride-1 convolution, no pooling.
    Cifar,
    /// 7x7 stride-2 convolution and 3x3 stride-2 max pooling.
    Imagenet,
}

impl Stem {
    pub fn default_input_size(self) -> usize {
        match self {
            Stem::Cifar => 32,
            Stem::Imagenet => 224,
        }
    }
}

/// Depth presets: total depth and blocks per stage.
pub const DEPTH_PRESETS: [(usize, [usize; 4]); 5] = [
    (26, [2, 2, 2, 2]),
    (38, [3, 3, 3, 3]),
    (50, [3, 4, 6, 3]),
    (77, [3, 4, 15, 3]),
    (101, [3, 4, 23, 3]),
];

pub const WIDTH_PRESETS: [f64; 3] = [0.25, 0.5, 1.0];

/// Bottleneck width of the first stage at multiplier 1; doubles per stage.
pub const BASE_WIDTH: usize = 64;

pub fn preset_blocks(depth: usize) -> Option<Vec<usize>> {
    DEPTH_PRESETS
        .iter()
        .find(|(d, _)| *d == depth)
        .map(|(_, b)| b.to_vec())
}

/// Declarative description of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// One of the depth presets; ignored when `blocks` is set.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Custom blocks per stage, overriding `depth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<usize>>,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_stem")]
    pub stem: Stem,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Square input side; defaults to the stem's native size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(default = "default_shortcut_norm")]
    pub shortcut_norm: NormSpec,
    #[serde(default)]
    pub weight_init: WeightInit,
}

fn default_depth() -> usize {
    26
}
fn default_width() -> f64 {
    1.0
}
fn default_base_width() -> usize {
    BASE_WIDTH
}
fn default_stem() -> Stem {
    Stem::Cifar
}
fn default_classes() -> usize {
    10
}
fn default_shortcut_norm() -> NormSpec {
    NormSpec::new(NormKind::Gn)
}

/// Resolved widths of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageDims {
    pub blocks: usize,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl NetworkConfig {
    pub fn new(variant: Variant, depth: usize, width: f64, stem: Stem, classes: usize) -> Self {
        Self {
            variant,
            depth,
            blocks: None,
            width,
            base_width: BASE_WIDTH,
            stem,
            classes,
            input_size: None,
            shortcut_norm: default_shortcut_norm(),
            weight_init: WeightInit::One,
        }
    }

    /// Small CIFAR-stem network with custom stages, for checks and tests.
    pub fn tiny(variant: Variant, blocks: Vec<usize>, base_width: usize, input_size: usize, classes: usize) -> Self {
        Self {
            blocks: Some(blocks),
            base_width,
            input_size: Some(input_size),
            ..Self::new(variant, 26, 1.0, Stem::Cifar, classes)
        }
    }

    pub fn block_counts(&self) -> Result<Vec<usize>> {
        match &self.blocks {
            Some(b) => Ok(b.clone()),
            None => preset_blocks(self.depth).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "depth {} is not a preset (26, 38, 50, 77, 101)",
                    self.depth
                ))
            }),
        }
    }

    pub fn input_side(&self) -> usize {
        self.input_size.unwrap_or_else(|| self.stem.default_input_size())
    }

    /// `round(v * width)`, at least 1.
    pub fn scaled(&self, v: usize) -> usize {
        ((v as f64 * self.width).round() as usize).max(1)
    }

    pub fn stem_width(&self) -> usize {
        self.scaled(self.base_width)
    }

    pub fn stages(&self) -> Result<Vec<StageDims>> {
        let blocks = self.block_counts()?;
        let mut c_in = self.stem_width();
        Ok(blocks
            .iter()
            .enumerate()
            .map(|(s, &b)| {
                let c_mid = self.scaled(self.base_width << s);
                let dims = StageDims {
                    blocks: b,
                    c_in,
                    c_mid,
                    c_out: 4 * c_mid,
                    stride: if s == 0 { 1 } else { 2 },
                };
                c_in = dims.c_out;
                dims
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.block_counts()?;
        if blocks.is_empty() || blocks.contains(&0) {
            return Err(Error::InvalidConfig("every stage needs at least one block".into()));
        }
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::InvalidConfig(format!("width multiplier {} must be positive", self.width)));
        }
        if self.base_width == 0 || self.classes == 0 {
            return Err(Error::InvalidConfig("base width and class count must be positive".into()));
        }
        self.shortcut_norm.validate()?;
        if self.shortcut_norm.affine {
            return Err(Error::InvalidConfig("shortcut normalization must be affine-free".into()));
        }
        if self.variant.dense_sources().is_some() {
            for st in self.stages()? {
                self.shortcut_norm.reduction(st.c_out)?;
                if self.variant.has_inner_shortcuts() {
                    self.shortcut_norm.reduction(st.c_mid)?;
                }
            }
        }
        let side = self.input_side();
        if side == 0 {
            return Err(Error::InvalidConfig("input size must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_block_designs() {
        assert_eq!(preset_blocks(26).unwrap(), vec![2, 2, 2, 2]);
        assert_eq!(preset_blocks(38).unwrap(), vec![3, 3, 3, 3]);
        assert_eq!(preset_blocks(50).unwrap(), vec![3, 4, 6, 3]);
        assert_eq!(preset_blocks(77).unwrap(), vec![3, 4, 15, 3]);
        assert_eq!(preset_blocks(101).unwrap(), vec![3, 4, 23, 3]);
        assert!(preset_blocks(34).is_none());
    }

    #[test]
    fn imagenet_widths() {
        let cfg = NetworkConfig::new(Variant::ResNet, 50, 1.0, Stem::Imagenet, 1000);
        let st = cfg.stages().unwrap();
        let mids: Vec<_> = st.iter().map(|s| s.c_mid).collect();
        let outs: Vec<_> = st.iter().map(|s| s.c_out).collect();
        assert_eq!(mids, vec![64, 128, 256, 512]);
        assert_eq!(outs, vec![256, 512, 1024, 2048]);
        let quarter = NetworkConfig::new(Variant::ResNet, 50, 0.25, Stem::Cifar, 100);
        let outs: Vec<_> = quarter.stages().unwrap().iter().map(|s| s.c_out).collect();
        assert_eq!(outs, vec![64, 128, 256, 512]);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = NetworkConfig::new(Variant::DsNet, 34, 1.0, Stem::Cifar, 10);
        assert!(cfg.validate().is_err());
        cfg.depth = 26;
        cfg.width = 0.0;
        assert!(cfg.validate().is_err());
        cfg.width = 0.25;
        cfg.validate().unwrap();
        cfg.shortcut_norm.affine = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"variant": "ds2net", "depth": 50, "width": 0.25, "classes": 100,
                       "shortcut_norm": {"kind": "gn"}}"#;
        let cfg = NetworkConfig::from_json(text).unwrap();
        assert_eq!(cfg.variant, Variant::Ds2Net);
        assert_eq!(cfg.stem, Stem::Cifar);
        let again = NetworkConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert!(NetworkConfig::from_json(r#"{"variant": "dsnet", "bogus": 1}"#).is_err());
    }
}
