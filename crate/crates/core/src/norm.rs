//! Batch, group, layer and instance normalization.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
/// Upper bound on the group count picked by [`default_groups`].
pub const MAX_GROUPS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[serde(alias = "BN")]
    Bn,
    #[serde(alias = "GN")]
    Gn,
    #[serde(alias = "LN")]
    Ln,
    #[serde(alias = "IN")]
    In,
    #[serde(alias = "None")]
    None,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(NormKind::Bn),
            "gn" => Ok(NormKind::Gn),
            "ln" => Ok(NormKind::Ln),
            "in" => Ok(NormKind::In),
            "none" => Ok(NormKind::None),
            other => Err(Error::InvalidConfig(format!("unknown normalization `{other}`"))),
        }
    }
}

/// Normalization family descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    /// Group count for GN. `None` selects [`default_groups`] at use time.
    #[serde(default)]
    pub groups: Option<usize>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub affine: bool,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

impl NormSpec {
    pub fn new(kind: NormKind) -> Self {
        Self {
            kind,
            groups: None,
            eps: DEFAULT_EPS,
            affine: false,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn group(groups: usize) -> Self {
        Self {
            groups: Some(groups),
            ..Self::new(NormKind::Gn)
        }
    }

    pub fn with_affine(mut self, affine: bool) -> Self {
        self.affine = affine;
        self
    }

    /// Affine BN as used inside the backbone blocks.
    pub fn backbone() -> Self {
        Self::new(NormKind::Bn).with_affine(true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("normalization eps must be positive".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidConfig("normalization momentum must lie in (0, 1)".into()));
        }
        if self.groups == Some(0) {
            return Err(Error::InvalidConfig("group count must be positive".into()));
        }
        Ok(())
    }

    /// Reduction pattern for `channels` channels; `None` for kind `None`.
    pub fn reduction(&self, channels: usize) -> Result<Option<Reduction>> {
        let r = match self.kind {
            NormKind::None => return Ok(None),
            NormKind::Bn => Reduction::PerChannel,
            NormKind::Ln => Reduction::PerGroup { groups: 1 },
            NormKind::In => Reduction::PerGroup { groups: channels },
            NormKind::Gn => {
                let groups = self.groups.unwrap_or_else(|| default_groups(channels));
                if groups == 0 || !channels.is_multiple_of(groups) {
                    return Err(Error::GroupDivisibility { channels, groups });
                }
                Reduction::PerGroup { groups }
            }
        };
        Ok(Some(r))
    }
}

/// Largest divisor of `channels` not exceeding [`MAX_GROUPS`].
pub fn default_groups(channels: usize) -> usize {
    (1..=MAX_GROUPS.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Which elements share one mean/variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// One unit per channel over `(n, h, w)`.
    PerChannel,
    /// One unit per `(sample, group)` over the group's channels and `(h, w)`.
    PerGroup { groups: usize },
}

impl Reduction {
    pub fn units(&self, s: Shape) -> usize {
        match *self {
            Reduction::PerChannel => s.c,
            Reduction::PerGroup { groups } => s.n * groups,
        }
    }

    /// Contiguous `(start, len)` segments of unit `u`.
    fn segments(&self, s: Shape, u: usize) -> impl Iterator<Item = (usize, usize)> {
        let plane = s.plane();
        let (first, count, step, len) = match *self {
            Reduction::PerChannel => (u * plane, s.n, s.c * plane, plane),
            Reduction::PerGroup { groups } => {
                let per = s.c / groups * plane;
                (u * per, 1, 0, per)
            }
        };
        (0..count).map(move |k| (first + k * step, len))
    }

    fn check(&self, s: Shape) -> Result<()> {
        if let Reduction::PerGroup { groups } = *self {
            if groups == 0 || !s.c.is_multiple_of(groups) {
                return Err(Error::GroupDivisibility { channels: s.c, groups });
            }
        }
        Ok(())
    }
}

pub struct Standardized<T> {
    pub output: Tensor<T>,
    pub mean: Vec<T>,
    /// Biased (1/N) variance per unit.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Two-pass zero-mean/unit-variance standardization per unit.
pub fn standardize<T: Scalar>(x: &Tensor<T>, reduction: Reduction, eps: T) -> Result<Standardized<T>> {
    let s = x.shape();
    reduction.check(s)?;
    let units = reduction.units(s);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    let mut means = Vec::with_capacity(units);
    let mut vars = Vec::with_capacity(units);
    let mut inv_stds = Vec::with_capacity(units);
    for u in 0..units {
        let mut count = 0usize;
        let mut sum = T::zero();
        for (start, len) in reduction.segments(s, u) {
            sum += xd[start..start + len].iter().copied().sum::<T>();
            count += len;
        }
        let n = T::lit(count as f64);
        let mean = sum / n;
        let mut sq = T::zero();
        for (start, len) in reduction.segments(s, u) {
            sq += xd[start..start + len]
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>();
        }
        let var = sq / n;
        let inv_std = T::one() / (var + eps).sqrt();
        for (start, len) in reduction.segments(s, u) {
            for (o, &v) in out[start..start + len].iter_mut().zip(&xd[start..start + len]) {
                *o = (v - mean) * inv_std;
            }
        }
        means.push(mean);
        vars.push(var);
        inv_stds.push(inv_std);
    }
    Ok(Standardized {
        output: Tensor::from_shape(s, out),
        mean: means,
        var: vars,
        inv_std: inv_stds,
    })
}

/// `dx = inv_std * (dy - mean(dy) - y * mean(dy * y))` per unit, where `y`
/// is the standardized output.
pub fn standardize_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, inv_std: &[T], reduction: Reduction) -> Result<Tensor<T>> {
    y.check_same_shape(dy, "standardize_backward")?;
    let s = y.shape();
    let yd = y.data();
    let gd = dy.data();
    let mut dx = vec![T::zero(); yd.len()];
    for (u, &istd) in inv_std.iter().enumerate().take(reduction.units(s)) {
        let mut count = 0usize;
        let mut sum_g = T::zero();
        let mut sum_gy = T::zero();
        for (start, len) in reduction.segments(s, u) {
            for i in start..start + len {
                sum_g += gd[i];
                sum_gy += gd[i] * yd[i];
            }
            count += len;
        }
        let n = T::lit(count as f64);
        let mg = sum_g / n;
        let mgy = sum_gy / n;
        for (start, len) in reduction.segments(s, u) {
            for i in start..start + len {
                dx[i] = istd * (gd[i] - mg - yd[i] * mgy);
            }
        }
    }
    Ok(Tensor::from_shape(s, dx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Persistent per-layer state. Affine scale/shift live in the parameter
/// registry; this holds the non-learnable running statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormState<T> {
    pub running_mean: Option<Vec<T>>,
    pub running_var: Option<Vec<T>>,
}

impl<T: Scalar> NormState<T> {
    pub fn new() -> Self {
        Self {
            running_mean: None,
            running_var: None,
        }
    }

    /// State with populated statistics (mean 0, variance 1).
    pub fn with_channels(c: usize) -> Self {
        Self {
            running_mean: Some(vec![T::zero(); c]),
            running_var: Some(vec![T::one(); c]),
        }
    }

    fn update(&mut self, mean: &[T], var: &[T], momentum: T) {
        let blend = |slot: &mut Option<Vec<T>>, batch: &[T]| match slot {
            Some(r) if r.len() == batch.len() => {
                for (rv, &bv) in r.iter_mut().zip(batch) {
                    *rv = (T::one() - momentum) * *rv + momentum * bv;
                }
            }
            _ => *slot = Some(batch.to_vec()),
        };
        blend(&mut self.running_mean, mean);
        blend(&mut self.running_var, var);
    }
}

/// Normalizes `x` on the tape.
///
/// BN in train mode uses batch statistics and folds them into the running
/// averages; in eval mode it applies the frozen statistics. GN/LN/IN always
/// use per-sample statistics. `affine` carries the `(1, c, 1, 1)` scale and
/// shift leaves when `spec.affine` is set.
pub fn normalize<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &NormSpec,
    state: &mut NormState<T>,
    mode: Mode,
    affine: Option<(Var, Var)>,
) -> Result<Var> {
    let shape = tape.value(x).shape();
    let Some(reduction) = spec.reduction(shape.c)? else {
        return Ok(x);
    };
    let eps = T::lit(spec.eps);
    let normed = match (spec.kind, mode) {
        (NormKind::Bn, Mode::Eval) => {
            let (Some(mean), Some(var)) = (&state.running_mean, &state.running_var) else {
                return Err(Error::MissingRunningStats);
            };
            if mean.len() != shape.c || var.len() != shape.c {
                return Err(Error::ChannelMismatch {
                    op: "batch_norm",
                    expected: shape.c,
                    got: mean.len(),
                });
            }
            let scale: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let offset = mean.clone();
            tape.channel_affine_const(x, &offset, &scale)?
        }
        (NormKind::Bn, Mode::Train) => {
            let (v, mean, var) = tape.normalize(x, reduction, eps)?;
            state.update(&mean, &var, T::lit(spec.momentum));
            v
        }
        _ => tape.normalize(x, reduction, eps)?.0,
    };
    match (spec.affine, affine) {
        (true, Some((gamma, beta))) => {
            let scaled = tape.channelwise_scale(normed, gamma)?;
            tape.channelwise_shift(scaled, beta)
        }
        (true, None) => Err(Error::InvalidConfig("affine normalization without scale/shift parameters".into())),
        (false, _) => Ok(normed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(x: &Tensor<f64>, spec: &NormSpec) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let mut st = NormState::new();
        let y = normalize(&mut tape, v, spec, &mut st, Mode::Train, None)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn default_group_choice() {
        assert_eq!(default_groups(64), 32);
        assert_eq!(default_groups(16), 16);
        assert_eq!(default_groups(48), 24);
        assert_eq!(default_groups(7), 7);
        assert_eq!(default_groups(100), 25);
    }

    #[test]
    fn constant_input_maps_to_zero() {
        let x = Tensor::<f64>::full([2, 4, 3, 3], 0.1).unwrap();
        for kind in [NormKind::Bn, NormKind::Gn, NormKind::Ln, NormKind::In] {
            let y = run(&x, &NormSpec::new(kind)).unwrap();
            assert!(y.data().iter().all(|v| v.abs() < 1e-9), "{kind:?}");
        }
    }

    #[test]
    fn none_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform([2, 3, 2, 2], -1.0, 1.0, &mut rng).unwrap();
        assert_eq!(run(&x, &NormSpec::new(NormKind::None)).unwrap(), x);
    }

    #[test]
    fn divisibility_error() {
        let x = Tensor::<f64>::ones([1, 6, 2, 2]).unwrap();
        assert!(matches!(
            run(&x, &NormSpec::group(4)),
            Err(Error::GroupDivisibility { channels: 6, groups: 4 })
        ));
    }

    #[test]
    fn bn_eval_requires_stats() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::ones([1, 2, 2, 2]).unwrap(), false);
        let mut st = NormState::new();
        let r = normalize(&mut tape, v, &NormSpec::new(NormKind::Bn), &mut st, Mode::Eval, None);
        assert!(matches!(r, Err(Error::MissingRunningStats)));
    }

    #[test]
    fn bn_running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_vec([2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let mut st = NormState::with_channels(1);
        normalize(&mut tape, v, &NormSpec::new(NormKind::Bn), &mut st, Mode::Train, None).unwrap();
        // batch mean 4, biased variance 5
        assert!((st.running_mean.as_ref().unwrap()[0] - 0.4).abs() < 1e-15);
        assert!((st.running_var.as_ref().unwrap()[0] - (0.9 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn bn_eval_is_per_channel_affine() {
        let mut st = NormState::<f64> {
            running_mean: Some(vec![1.0, -2.0]),
            running_var: Some(vec![4.0, 0.25]),
        };
        let x = Tensor::<f64>::from_vec([1, 2, 1, 2], vec![1.0, 3.0, -2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let y = normalize(&mut tape, v, &NormSpec::new(NormKind::Bn), &mut st, Mode::Eval, None).unwrap();
        let out = tape.value(y).data();
        let s0 = 1.0 / (4.0f64 + 1e-5).sqrt();
        let s1 = 1.0 / (0.25f64 + 1e-5).sqrt();
        assert_eq!(out, &[0.0, 2.0 * s0, 0.0, 2.0 * s1]);
    }
}
