//! Closed-form parameter, multiply-accumulate and activation-memory accounting.
//!
//! Nothing here builds a network: counts come from the configuration alone,
//! so they can be checked against the builder's parameter registry.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::arch::{NetworkConfig, Stem, Variant};
use crate::error::Result;
use crate::kernels::conv_out_dim;
use crate::scalar::DType;

/// Parameter totals by category. Running statistics are not parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub conv: u64,
    pub norm_affine: u64,
    pub classifier: u64,
    pub shortcut_weights: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.conv + self.norm_affine + self.classifier + self.shortcut_weights
    }

    /// Everything except the dense-shortcut weights.
    pub fn backbone(&self) -> u64 {
        self.total() - self.shortcut_weights
    }
}

fn pairs(blocks: u64) -> u64 {
    blocks * blocks.saturating_sub(1) / 2
}

/// Parameter count from the stage widths in closed form.
pub fn count_parameters(cfg: &NetworkConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let k: u64 = match cfg.stem {
        Stem::Cifar => 3,
        Stem::Imagenet => 7,
    };
    let c0 = cfg.stem_width() as u64;
    let mut p = ParamBreakdown {
        conv: 3 * c0 * k * k,
        norm_affine: 2 * c0,
        ..Default::default()
    };
    let stages = cfg.stages()?;
    for st in &stages {
        let (c_in, m, o, b) = (st.c_in as u64, st.c_mid as u64, st.c_out as u64, st.blocks as u64);
        // entry block with projection
        p.conv += c_in * m + 9 * m * m + m * o + c_in * o;
        p.norm_affine += 2 * (m + m + o) + 2 * o;
        // remaining blocks
        p.conv += (b - 1) * (o * m + 9 * m * m + m * o);
        p.norm_affine += (b - 1) * 2 * (m + m + o);
        if cfg.variant.dense_sources().is_some() {
            p.shortcut_weights += o * pairs(b);
        }
        if cfg.variant.has_inner_shortcuts() {
            p.shortcut_weights += m * pairs(b);
        }
    }
    let last = stages.last().map_or(c0, |s| s.c_out as u64);
    let classes = cfg.classes as u64;
    p.classifier = last * classes + classes;
    Ok(p)
}

/// One convolution of the forward pass with its spatial extent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvLayer {
    pub fn macs(&self) -> u64 {
        (self.c_out * self.c_in * self.k * self.k * self.h_out * self.w_out) as u64
    }
}

struct ConvEmitter {
    layers: Vec<ConvLayer>,
}

impl ConvEmitter {
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: String, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, hw: (usize, usize)) -> Result<(usize, usize)> {
        let h_out = conv_out_dim("conv2d", hw.0, k, stride, pad)?;
        let w_out = conv_out_dim("conv2d", hw.1, k, stride, pad)?;
        self.layers.push(ConvLayer {
            name,
            c_in,
            c_out,
            k,
            stride,
            pad,
            h_in: hw.0,
            w_in: hw.1,
            h_out,
            w_out,
        });
        Ok((h_out, w_out))
    }
}

/// Per-stage spatial extent after the stem and each stage's entry stride.
fn stage_spatial(cfg: &NetworkConfig, input: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let mut hw = stem_output(cfg, input)?;
    let mut out = Vec::new();
    for st in cfg.stages()? {
        hw = (
            conv_out_dim("conv2d", hw.0, 1, st.stride, 0)?,
            conv_out_dim("conv2d", hw.1, 1, st.stride, 0)?,
        );
        out.push(hw);
    }
    Ok(out)
}

fn stem_output(cfg: &NetworkConfig, input: (usize, usize)) -> Result<(usize, usize)> {
    Ok(match cfg.stem {
        Stem::Cifar => input,
        Stem::Imagenet => {
            let h = conv_out_dim("conv2d", input.0, 7, 2, 3)?;
            let w = conv_out_dim("conv2d", input.1, 7, 2, 3)?;
            (
                conv_out_dim("max_pool", h, 3, 2, 1)?,
                conv_out_dim("max_pool", w, 3, 2, 1)?,
            )
        }
    })
}

/// Every convolution of the forward pass, in execution order. The classifier
/// is included as a 1x1 convolution over the pooled features.
pub fn conv_layers(cfg: &NetworkConfig, input: (usize, usize)) -> Result<Vec<ConvLayer>> {
    cfg.validate()?;
    let mut e = ConvEmitter { layers: Vec::new() };
    let c0 = cfg.stem_width();
    let mut hw = match cfg.stem {
        Stem::Cifar => e.conv("stem.conv".into(), 3, c0, 3, 1, 1, input)?,
        Stem::Imagenet => {
            e.conv("stem.conv".into(), 3, c0, 7, 2, 3, input)?;
            stem_output(cfg, input)?
        }
    };
    let mut last_c = c0;
    for (s, st) in cfg.stages()?.iter().enumerate() {
        for l in 0..st.blocks {
            let p = format!("stages.{s}.blocks.{l}");
            let (c_in, stride) = if l == 0 { (st.c_in, st.stride) } else { (st.c_out, 1) };
            let block_in = hw;
            hw = e.conv(format!("{p}.conv1"), c_in, st.c_mid, 1, stride, 0, hw)?;
            hw = e.conv(format!("{p}.conv2"), st.c_mid, st.c_mid, 3, 1, 1, hw)?;
            hw = e.conv(format!("{p}.conv3"), st.c_mid, st.c_out, 1, 1, 0, hw)?;
            if l == 0 {
                e.conv(format!("{p}.proj.conv"), c_in, st.c_out, 1, stride, 0, block_in)?;
            }
        }
        last_c = st.c_out;
    }
    e.conv("classifier".into(), last_c, cfg.classes, 1, 1, 0, (1, 1))?;
    Ok(e.layers)
}

/// Multiply-accumulate counts of one forward pass for a single image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MacReport {
    /// Convolutions including the classifier.
    pub conv_macs: u64,
    /// Shortcut work: one pass per normalized source plus a scale and an
    /// add per weighted term, counted in elements.
    pub shortcut_elementwise: u64,
}

impl MacReport {
    pub fn total(&self) -> u64 {
        self.conv_macs + self.shortcut_elementwise
    }
}

pub fn count_flops(cfg: &NetworkConfig, input: (usize, usize)) -> Result<MacReport> {
    let conv_macs = conv_layers(cfg, input)?.iter().map(ConvLayer::macs).sum();
    let mut shortcut = 0u64;
    for (st, hw) in cfg.stages()?.iter().zip(stage_spatial(cfg, input)?) {
        let plane = (hw.0 * hw.1) as u64;
        let b = st.blocks as u64;
        let sources = b.saturating_sub(1);
        let mut per_channel = |c: u64| shortcut += c * plane * (sources + 2 * pairs(b));
        if cfg.variant.dense_sources().is_some() {
            per_channel(st.c_out as u64);
        }
        if cfg.variant.has_inner_shortcuts() {
            per_channel(st.c_mid as u64);
        }
    }
    Ok(MacReport {
        conv_macs,
        shortcut_elementwise: shortcut,
    })
}

/// Tracks the live set of activation tensors and its peak size.
#[derive(Debug, Default)]
pub struct Liveness {
    live: HashMap<String, u64>,
    current: u64,
    peak: u64,
}

impl Liveness {
    pub fn alloc(&mut self, name: impl Into<String>, elements: u64) {
        let name = name.into();
        if let Some(old) = self.live.insert(name, elements) {
            self.current -= old;
        }
        self.current += elements;
        self.peak = self.peak.max(self.current);
    }

    pub fn free(&mut self, name: &str) {
        if let Some(v) = self.live.remove(name) {
            self.current -= v;
        }
    }

    pub fn free_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self.live.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        for n in names {
            self.free(&n);
        }
    }

    pub fn current(&self) -> u64 {
        self.current
    }

    /// Peak live elements.
    pub fn peak(&self) -> u64 {
        self.peak
    }
}

/// Peak live activation bytes of one forward pass.
///
/// Liveness rule: a block's intermediates die once consumed. ResNet keeps
/// only the current aggregation output; ResNet-dense keeps every aggregation
/// output of the stage; dense-shortcut variants keep every source and its
/// normalized form until the stage ends.
pub fn estimate_activation_memory(cfg: &NetworkConfig, batch: usize, dtype: DType) -> Result<u64> {
    cfg.validate()?;
    let side = cfg.input_side();
    let n = batch as u64;
    let mut lv = Liveness::default();
    lv.alloc("input", n * 3 * (side * side) as u64);
    let c0 = cfg.stem_width() as u64;
    let stem_hw = stem_output(cfg, (side, side))?;
    match cfg.stem {
        Stem::Cifar => lv.alloc("prev", n * c0 * (side * side) as u64),
        Stem::Imagenet => {
            let h = conv_out_dim("conv2d", side, 7, 2, 3)? as u64;
            lv.alloc("stem", n * c0 * h * h);
            lv.free("input");
            lv.alloc("prev", n * c0 * (stem_hw.0 * stem_hw.1) as u64);
            lv.free("stem");
        }
    }
    lv.free("input");

    let variant = cfg.variant;
    let stages = cfg.stages()?;
    for (s, (st, hw)) in stages.iter().zip(stage_spatial(cfg, (side, side))?).enumerate() {
        let plane = (hw.0 * hw.1) as u64;
        let (m, o) = (st.c_mid as u64, st.c_out as u64);
        for l in 0..st.blocks {
            let held = format!("held.{s}.");
            lv.alloc("z", n * m * plane);
            if variant.has_inner_shortcuts() {
                if l + 1 < st.blocks {
                    lv.alloc(format!("{held}inner_norm.{l}"), n * m * plane);
                }
                if l > 0 {
                    lv.alloc("z_in", n * m * plane);
                }
            }
            lv.alloc("t", n * m * plane);
            lv.free("z");
            lv.free("z_in");
            lv.alloc("x", n * o * plane);
            lv.free("t");
            if l == 0 {
                lv.alloc("proj", n * o * plane);
            }
            lv.alloc("y", n * o * plane);
            lv.free("x");
            lv.free("proj");
            match variant {
                Variant::ResNet | Variant::Plain => lv.free("prev"),
                Variant::ResNetDense | Variant::DsNetA | Variant::DsNet | Variant::Ds2Net => {
                    // `prev` is the previous aggregation output; keep it for the stage
                    if let Some(&v) = lv.live.get("prev") {
                        lv.free("prev");
                        if l > 0 {
                            lv.alloc(format!("{held}y.{}", l - 1), v);
                        }
                    }
                    if variant.dense_sources().is_some() && l + 1 < st.blocks {
                        lv.alloc(format!("{held}norm.{l}"), n * o * plane);
                    }
                }
            }
            let y = lv.live.remove("y").unwrap_or(0);
            lv.current -= y;
            lv.alloc("prev", y);
        }
        lv.free_prefix(&format!("held.{s}."));
    }
    Ok(lv.peak() * dtype.size_of() as u64)
}

/// One row of the resource table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceReport {
    pub variant: Variant,
    pub depth: String,
    pub width: f64,
    pub params: ParamBreakdown,
    pub macs: MacReport,
    pub activation_bytes: u64,
}

impl ResourceReport {
    pub fn gflops(&self) -> f64 {
        self.macs.total() as f64 / 1e9
    }

    pub fn activation_mb(&self) -> f64 {
        self.activation_bytes as f64 / (1024.0 * 1024.0)
    }
}

pub fn resource_report(cfg: &NetworkConfig, batch: usize, dtype: DType) -> Result<ResourceReport> {
    let side = cfg.input_side();
    let depth = match &cfg.blocks {
        Some(b) => format!("{b:?}"),
        None => cfg.depth.to_string(),
    };
    Ok(ResourceReport {
        variant: cfg.variant,
        depth,
        width: cfg.width,
        params: count_parameters(cfg)?,
        macs: count_flops(cfg, (side, side))?,
        activation_bytes: estimate_activation_memory(cfg, batch, dtype)?,
    })
}

const HEADER: [&str; 7] = ["variant", "depth", "width", "params", "shortcut_params", "gflops", "activation_mb"];

/// Fixed-width text table.
pub fn render_table(rows: &[ResourceReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<13} {:>6} {:>6} {:>12} {:>15} {:>9} {:>13}",
        HEADER[0], HEADER[1], HEADER[2], HEADER[3], HEADER[4], HEADER[5], HEADER[6]
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<13} {:>6} {:>6} {:>12} {:>15} {:>9.3} {:>13.1}",
            r.variant.name(),
            r.depth,
            r.width,
            r.params.total(),
            r.params.shortcut_weights,
            r.gflops(),
            r.activation_mb()
        );
    }
    out
}

pub fn render_csv(rows: &[ResourceReport]) -> String {
    let mut out = HEADER.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.3}",
            r.variant.name(),
            r.depth.replace(',', ";"),
            r.width,
            r.params.total(),
            r.params.shortcut_weights,
            r.gflops(),
            r.activation_mb()
        );
    }
    out
}
