use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NetworkConfig, StageDims, Stem, Variant};
use crate::autograd::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::norm::{self, Mode, NormKind, NormSpec, NormState};
use crate::scalar::Scalar;
use crate::shortcut::{aggregate_block_input, naive_dense_identity_sum, AggregationCache, ShortcutWeights, SourceKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamCategory {
    Conv,
    NormAffine,
    Classifier,
    ShortcutWeight,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Gaussian with std `sqrt(2 / fan_out)`.
    HeNormal,
    Normal(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub dims: [usize; 4],
    pub category: ParamCategory,
    pub init: Init,
    pub learnable: bool,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Affine batch normalization inside the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnRef {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub stride: usize,
    pub conv1: ParamId,
    pub bn1: BnRef,
    pub conv2: ParamId,
    pub bn2: BnRef,
    pub conv3: ParamId,
    pub bn3: BnRef,
    /// Strided 1x1 projection; present exactly on a stage's first block.
    pub proj: Option<(ParamId, BnRef)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageLayout {
    pub dims: StageDims,
    pub blocks: Vec<BlockLayout>,
    /// Shortcuts into block inputs.
    pub outer: ShortcutWeights,
    /// Shortcuts into the 3x3 convolution inputs.
    pub inner: ShortcutWeights,
    /// Normalization states of the outer / inner shortcut sources.
    pub outer_states: Range<usize>,
    pub inner_states: Range<usize>,
}

/// Counters from the most recent forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Shortcut-source normalizations executed.
    pub shortcut_normalizations: usize,
    /// Distinct shortcut sources consumed by at least one shortcut.
    pub consumed_sources: usize,
    /// Weighted shortcut terms summed.
    pub shortcut_terms: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct StateInfo {
    name: String,
    channels: usize,
    /// BN states carry running statistics from construction.
    populated: bool,
}

#[derive(Default)]
struct Builder {
    params: Vec<ParamInfo>,
    states: Vec<StateInfo>,
}

impl Builder {
    fn param(&mut self, name: String, dims: [usize; 4], category: ParamCategory, init: Init) -> ParamId {
        self.params.push(ParamInfo {
            name,
            dims,
            category,
            init,
            learnable: true,
        });
        ParamId(self.params.len() - 1)
    }

    fn conv(&mut self, name: String, c_out: usize, c_in: usize, k: usize) -> ParamId {
        self.param(name, [c_out, c_in, k, k], ParamCategory::Conv, Init::HeNormal)
    }

    fn state(&mut self, name: String, channels: usize, populated: bool) -> usize {
        self.states.push(StateInfo {
            name,
            channels,
            populated,
        });
        self.states.len() - 1
    }

    fn bn(&mut self, name: &str, c: usize) -> BnRef {
        let gamma = self.param(format!("{name}.weight"), [1, c, 1, 1], ParamCategory::NormAffine, Init::Const(1.0));
        let beta = self.param(format!("{name}.bias"), [1, c, 1, 1], ParamCategory::NormAffine, Init::Const(0.0));
        let state = self.state(name.to_string(), c, true);
        BnRef { gamma, beta, state }
    }
}

struct Layout {
    stem_conv: ParamId,
    stem_bn: BnRef,
    stages: Vec<StageLayout>,
    fc_weight: ParamId,
    fc_bias: ParamId,
}

fn build_layout(cfg: &NetworkConfig) -> Result<(Layout, Builder)> {
    cfg.validate()?;
    let mut b = Builder::default();
    let stem_k = match cfg.stem {
        Stem::Cifar => 3,
        Stem::Imagenet => 7,
    };
    let stem_c = cfg.stem_width();
    let stem_conv = b.conv("stem.conv".into(), stem_c, 3, stem_k);
    let stem_bn = b.bn("stem.bn", stem_c);
    let shortcut_bn = cfg.shortcut_norm.kind == NormKind::Bn;

    let mut stages = Vec::new();
    for (s, dims) in cfg.stages()?.into_iter().enumerate() {
        let mut blocks = Vec::with_capacity(dims.blocks);
        let mut outer = ShortcutWeights::default();
        let mut inner = ShortcutWeights::default();
        for l in 0..dims.blocks {
            let p = format!("stages.{s}.blocks.{l}");
            let c_in = if l == 0 { dims.c_in } else { dims.c_out };
            let conv1 = b.conv(format!("{p}.conv1"), dims.c_mid, c_in, 1);
            let bn1 = b.bn(&format!("{p}.bn1"), dims.c_mid);
            let conv2 = b.conv(format!("{p}.conv2"), dims.c_mid, dims.c_mid, 3);
            let bn2 = b.bn(&format!("{p}.bn2"), dims.c_mid);
            let conv3 = b.conv(format!("{p}.conv3"), dims.c_out, dims.c_mid, 1);
            let bn3 = b.bn(&format!("{p}.bn3"), dims.c_out);
            let proj = (l == 0).then(|| {
                let conv = b.conv(format!("{p}.proj.conv"), dims.c_out, c_in, 1);
                (conv, b.bn(&format!("{p}.proj.bn"), dims.c_out))
            });
            if cfg.variant.dense_sources().is_some() {
                let init = Init::Const(cfg.weight_init.value(l));
                outer.targets.push(
                    (0..l)
                        .map(|i| b.param(format!("{p}.ds.{i}"), [1, dims.c_out, 1, 1], ParamCategory::ShortcutWeight, init))
                        .collect(),
                );
            }
            if cfg.variant.has_inner_shortcuts() {
                let init = Init::Const(cfg.weight_init.value(l));
                inner.targets.push(
                    (0..l)
                        .map(|i| b.param(format!("{p}.ds2.{i}"), [1, dims.c_mid, 1, 1], ParamCategory::ShortcutWeight, init))
                        .collect(),
                );
            }
            blocks.push(BlockLayout {
                c_in,
                c_mid: dims.c_mid,
                c_out: dims.c_out,
                stride: if l == 0 { dims.stride } else { 1 },
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
                proj,
            });
        }
        // One state per source that has a consumer (blocks 0..B-1).
        let sources = dims.blocks - 1;
        let start = b.states.len();
        if cfg.variant.dense_sources().is_some() {
            for i in 0..sources {
                b.state(format!("stages.{s}.shortcut.{i}.norm"), dims.c_out, shortcut_bn);
            }
        }
        let outer_states = start..b.states.len();
        let start = b.states.len();
        if cfg.variant.has_inner_shortcuts() {
            for i in 0..sources {
                b.state(format!("stages.{s}.inner_shortcut.{i}.norm"), dims.c_mid, shortcut_bn);
            }
        }
        let inner_states = start..b.states.len();
        stages.push(StageLayout {
            dims,
            blocks,
            outer,
            inner,
            outer_states,
            inner_states,
        });
    }
    let last = stages.last().map(|s| s.dims.c_out).unwrap_or(stem_c);
    let fc_weight = b.param("classifier.weight".into(), [cfg.classes, last, 1, 1], ParamCategory::Classifier, Init::Normal(0.01));
    let fc_bias = b.param("classifier.bias".into(), [1, cfg.classes, 1, 1], ParamCategory::Classifier, Init::Const(0.0));
    Ok((
        Layout {
            stem_conv,
            stem_bn,
            stages,
            fc_weight,
            fc_bias,
        },
        b,
    ))
}

/// Parameter registry of a configuration, without allocating values.
pub fn registry(cfg: &NetworkConfig) -> Result<Vec<ParamInfo>> {
    Ok(build_layout(cfg)?.1.params)
}

/// A built network: parameter registry, values, normalization state and wiring.
#[derive(Debug, Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Vec<ParamInfo>,
    values: Vec<Tensor<T>>,
    state_names: Vec<String>,
    states: Vec<NormState<T>>,
    stem_conv: ParamId,
    stem_bn: BnRef,
    stages: Vec<StageLayout>,
    fc_weight: ParamId,
    fc_bias: ParamId,
    last_stats: ForwardStats,
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes a network; `seed` drives all random initial values.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let (layout, builder) = build_layout(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(builder.params.len());
        for p in &builder.params {
            let t = match p.init {
                Init::HeNormal => {
                    let fan_out = (p.dims[0] * p.dims[2] * p.dims[3]) as f64;
                    Tensor::normal(p.dims, (2.0 / fan_out).sqrt(), &mut rng)?
                }
                Init::Normal(std) => Tensor::normal(p.dims, std, &mut rng)?,
                Init::Const(v) => Tensor::full(p.dims, T::lit(v))?,
            };
            values.push(t);
        }
        let states = builder
            .states
            .iter()
            .map(|s| {
                if s.populated {
                    NormState::with_channels(s.channels)
                } else {
                    NormState::new()
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params: builder.params,
            values,
            state_names: builder.states.into_iter().map(|s| s.name).collect(),
            states,
            stem_conv: layout.stem_conv,
            stem_bn: layout.stem_bn,
            stages: layout.stages,
            fc_weight: layout.fc_weight,
            fc_bias: layout.fc_bias,
            last_stats: ForwardStats::default(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamInfo::numel).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_learnable(&mut self, id: ParamId, learnable: bool) {
        self.params[id.0].learnable = learnable;
    }

    pub fn stages(&self) -> &[StageLayout] {
        &self.stages
    }

    /// Named normalization states (running statistics).
    pub fn norm_states(&self) -> impl Iterator<Item = (&str, &NormState<T>)> {
        self.state_names.iter().map(String::as_str).zip(&self.states)
    }

    pub fn norm_states_mut(&mut self) -> impl Iterator<Item = (&str, &mut NormState<T>)> {
        self.state_names.iter().map(String::as_str).zip(self.states.iter_mut())
    }

    pub fn last_forward_stats(&self) -> ForwardStats {
        self.last_stats
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let side = self.config.input_side();
        let d = input.dims();
        if d[1] != 3 || d[2] != side || d[3] != side {
            return Err(Error::InputShape {
                expected: [3, side, side],
                got: d,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns `(n, classes, 1, 1)` logits.
    /// Train mode normalizes with batch statistics and updates running averages.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: &Tensor<T>, mode: Mode) -> Result<Var> {
        let mut states = std::mem::take(&mut self.states);
        let out = self.forward_with(&mut states, tape, input, mode);
        self.states = states;
        let (logits, stats) = out?;
        self.last_stats = stats;
        Ok(logits)
    }

    fn forward_with(
        &self,
        states: &mut [NormState<T>],
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Var, ForwardStats)> {
        self.check_input(input)?;
        let mut ctx = Ctx {
            tape,
            params: &self.params,
            values: &self.values,
            states,
            mode,
            shortcut_norm: self.config.shortcut_norm,
            stats: ForwardStats::default(),
        };
        let x = ctx.tape.leaf(input.clone(), false);
        let (stride, pad) = match self.config.stem {
            Stem::Cifar => (1, 1),
            Stem::Imagenet => (2, 3),
        };
        let h = ctx.conv(x, self.stem_conv, stride, pad)?;
        let h = ctx.bn(h, self.stem_bn)?;
        let mut h = ctx.tape.relu(h);
        if self.config.stem == Stem::Imagenet {
            h = ctx.tape.max_pool(h, 3, 2, 1)?;
        }
        for stage in &self.stages {
            h = ctx.stage(self.config.variant, stage, h)?;
        }
        let pooled = ctx.tape.global_avg_pool(h);
        let w = ctx.bind(self.fc_weight);
        let b = ctx.bind(self.fc_bias);
        let logits = ctx.tape.conv2d(pooled, w, 1, 0)?;
        let logits = ctx.tape.channelwise_shift(logits, b)?;
        Ok((logits, ctx.stats))
    }

    /// Eval-mode logits on a gradient-free tape; running statistics are not touched.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut states = self.states.clone();
        let mut tape = Tape::no_grad();
        let (out, _) = self.forward_with(&mut states, &mut tape, input, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Train-mode mean cross-entropy, the logits, and the gradient of every
    /// registry parameter (zeros where no gradient reaches or the parameter is frozen).
    pub fn loss_and_gradients(&mut self, input: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, input, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let loss_value = tape.value(loss).data()[0];
        let logits_value = tape.value(logits).clone();
        let grads = tape.backward(loss)?;
        let out = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| grads.param_or_zeros(ParamId(i), v))
            .collect();
        Ok((loss_value, logits_value, out))
    }

    /// Train-mode loss without gradients. Running statistics are left untouched.
    pub fn loss(&self, input: &Tensor<T>, labels: &[usize]) -> Result<T> {
        Ok(self.loss_with_pattern(input, labels)?.0)
    }

    /// [`Network::loss`] together with the tape's [`Tape::activation_pattern`].
    pub fn loss_with_pattern(&self, input: &Tensor<T>, labels: &[usize]) -> Result<(T, u64)> {
        let mut states = self.states.clone();
        let mut tape = Tape::no_grad();
        let (logits, _) = self.forward_with(&mut states, &mut tape, input, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        Ok((tape.value(loss).data()[0], tape.activation_pattern()))
    }
}

struct Ctx<'a, T> {
    tape: &'a mut Tape<T>,
    params: &'a [ParamInfo],
    values: &'a [Tensor<T>],
    states: &'a mut [NormState<T>],
    mode: Mode,
    shortcut_norm: NormSpec,
    stats: ForwardStats,
}

impl<T: Scalar> Ctx<'_, T> {
    fn bind(&mut self, id: ParamId) -> Var {
        self.tape.param(id, &self.values[id.0], self.params[id.0].learnable)
    }

    fn conv(&mut self, x: Var, id: ParamId, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bind(id);
        self.tape.conv2d(x, w, stride, pad)
    }

    fn bn(&mut self, x: Var, r: BnRef) -> Result<Var> {
        let gamma = self.bind(r.gamma);
        let beta = self.bind(r.beta);
        norm::normalize(
            self.tape,
            x,
            &NormSpec::backbone(),
            &mut self.states[r.state],
            self.mode,
            Some((gamma, beta)),
        )
    }

    fn stage(&mut self, variant: Variant, stage: &StageLayout, input: Var) -> Result<Var> {
        let mut outer = variant
            .dense_sources()
            .map(|kind| AggregationCache::new(self.shortcut_norm, kind));
        let mut inner = variant
            .has_inner_shortcuts()
            .then(|| AggregationCache::new(self.shortcut_norm, SourceKind::B));
        let mut history: Vec<Var> = Vec::with_capacity(stage.blocks.len());
        let mut prev = input;

        for (l, block) in stage.blocks.iter().enumerate() {
            let z = self.conv(prev, block.conv1, block.stride, 0)?;
            let z = self.bn(z, block.bn1)?;
            let z = self.tape.relu(z);
            let z_in = match inner.as_mut() {
                Some(cache) => {
                    let ws: Vec<Var> = stage.inner.for_block(l).iter().map(|&id| self.bind(id)).collect();
                    let states = &mut self.states[stage.inner_states.clone()];
                    let agg = aggregate_block_input(self.tape, cache, z, &ws, states, self.mode)?;
                    self.stats.shortcut_terms += ws.len();
                    cache.register(z);
                    agg
                }
                None => z,
            };
            let t = self.conv(z_in, block.conv2, 1, 1)?;
            let t = self.bn(t, block.bn2)?;
            let t = self.tape.relu(t);
            let t = self.conv(t, block.conv3, 1, 0)?;
            let x = self.bn(t, block.bn3)?;

            let pre = if let Some((proj_conv, proj_bn)) = block.proj {
                let sc = self.conv(prev, proj_conv, block.stride, 0)?;
                let sc = self.bn(sc, proj_bn)?;
                self.tape.add_n(&[sc, x])?
            } else {
                match variant {
                    Variant::ResNet => self.tape.add_n(&[prev, x])?,
                    Variant::ResNetDense => naive_dense_identity_sum(self.tape, &history, x)?,
                    Variant::Plain => x,
                    Variant::DsNetA | Variant::DsNet | Variant::Ds2Net => {
                        let cache = outer.as_mut().expect("dense variant has an outer cache");
                        let ws: Vec<Var> = stage.outer.for_block(l).iter().map(|&id| self.bind(id)).collect();
                        let states = &mut self.states[stage.outer_states.clone()];
                        self.stats.shortcut_terms += ws.len();
                        aggregate_block_input(self.tape, cache, x, &ws, states, self.mode)?
                    }
                }
            };
            let y = self.tape.relu(pre);
            if let Some(cache) = outer.as_mut() {
                cache.register_block(x, y);
            }
            history.push(y);
            prev = y;
        }
        for cache in outer.iter().chain(inner.iter()) {
            self.stats.shortcut_normalizations += cache.normalize_count();
            self.stats.consumed_sources += (0..cache.len())
                .filter(|&i| cache.consumers(crate::shortcut::SourceId(i)) > 0)
                .count();
        }
        Ok(prev)
    }
}
