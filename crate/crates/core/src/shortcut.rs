//! Dense weighted normalized shortcuts.
//!
//! Block `l` of a stage receives `W[l][0] * N(s_0) + ... + W[l][l-1] * N(s_{l-1}) + X_l`,
//! where the sources `s_i` are earlier raw block outputs `X_i` (variant a)
//! or earlier aggregation outputs `Y_i` (variant b), `N` is an affine-free
//! normalization and `W[l][i]` a learnable per-channel weight. Each source is
//! normalized once per forward pass and the result shared by every consumer.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::norm::{self, Mode, NormSpec, NormState};
use crate::scalar::Scalar;

/// Which tensor of a preceding block feeds the dense shortcuts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// Raw block output `X_i`.
    A,
    /// Aggregation output `Y_i`.
    B,
}

/// Initial value of every shortcut weight entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    #[default]
    One,
    Zero,
    /// `1 / (l + 1)` for target block `l`.
    InverseDepth,
}

impl WeightInit {
    pub fn value(self, target: usize) -> f64 {
        match self {
            WeightInit::One => 1.0,
            WeightInit::Zero => 0.0,
            WeightInit::InverseDepth => 1.0 / (target as f64 + 1.0),
        }
    }
}

/// Registry ids of the channel-wise weights of one stage: `targets[l][i]`
/// scales source `i` into block `l`, so `targets[l].len() == l`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShortcutWeights {
    pub targets: Vec<Vec<ParamId>>,
}

impl ShortcutWeights {
    pub fn for_block(&self, l: usize) -> &[ParamId] {
        self.targets.get(l).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn count(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }
}

/// Handle to a source registered in an [`AggregationCache`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceId(pub usize);

#[derive(Debug)]
struct Entry {
    source: Var,
    normalized: Option<Var>,
    consumers: usize,
}

/// Per-forward-pass store of shortcut sources and their shared normalizations.
#[derive(Debug)]
pub struct AggregationCache {
    spec: NormSpec,
    kind: SourceKind,
    entries: Vec<Entry>,
    normalize_count: usize,
}

impl AggregationCache {
    pub fn new(spec: NormSpec, kind: SourceKind) -> Self {
        Self {
            spec,
            kind,
            entries: Vec::new(),
            normalize_count: 0,
        }
    }

    pub fn spec(&self) -> &NormSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn register(&mut self, source: Var) -> SourceId {
        self.entries.push(Entry {
            source,
            normalized: None,
            consumers: 0,
        });
        SourceId(self.entries.len() - 1)
    }

    /// Registers block `l`'s outputs, keeping the one this cache's variant uses.
    pub fn register_block(&mut self, x: Var, y: Var) -> SourceId {
        match self.kind {
            SourceKind::A => self.register(x),
            SourceKind::B => self.register(y),
        }
    }

    pub fn source(&self, id: SourceId) -> Result<Var> {
        self.entries
            .get(id.0)
            .map(|e| e.source)
            .ok_or(Error::UnregisteredSource(id.0))
    }

    /// Times a source normalization actually executed in this pass.
    pub fn normalize_count(&self) -> usize {
        self.normalize_count
    }

    pub fn consumers(&self, id: SourceId) -> usize {
        self.entries.get(id.0).map_or(0, |e| e.consumers)
    }

    /// Normalized form of a registered source, computed on first request.
    pub fn shared_normalize<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        id: SourceId,
        state: &mut NormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let spec = self.spec;
        let entry = self
            .entries
            .get_mut(id.0)
            .ok_or(Error::UnregisteredSource(id.0))?;
        entry.consumers += 1;
        if let Some(v) = entry.normalized {
            return Ok(v);
        }
        let v = norm::normalize(tape, entry.source, &spec, state, mode, None)?;
        entry.normalized = Some(v);
        self.normalize_count += 1;
        Ok(v)
    }
}

/// `w ⊙ N(s)`: channel-wise weight applied to a normalized source.
pub fn ds_apply<T: Scalar>(tape: &mut Tape<T>, source_norm: Var, weight: Var) -> Result<Var> {
    let c = tape.value(source_norm).shape().c;
    let len = tape.value(weight).numel();
    if len != c || tape.value(weight).dims() != [1, c, 1, 1] {
        return Err(Error::ChannelMismatch {
            op: "ds_apply",
            expected: c,
            got: len,
        });
    }
    tape.channelwise_scale(source_norm, weight)
}

/// Input of block `l = weights.len()`: the weighted normalized sum of the
/// `l` sources registered so far plus the bare `x_l`.
///
/// `states` holds one normalization state per registered source.
pub fn aggregate_block_input<T: Scalar>(
    tape: &mut Tape<T>,
    cache: &mut AggregationCache,
    x_l: Var,
    weights: &[Var],
    states: &mut [NormState<T>],
    mode: Mode,
) -> Result<Var> {
    let l = weights.len();
    if cache.len() != l {
        return Err(Error::SourceCount {
            block: l,
            expected: l,
            got: cache.len(),
        });
    }
    if l == 0 {
        return Ok(x_l);
    }
    if states.len() < l {
        return Err(Error::SourceCount {
            block: l,
            expected: l,
            got: states.len(),
        });
    }
    let target = tape.value(x_l).dims();
    for i in 0..l {
        let s = tape.value(cache.source(SourceId(i))?).dims();
        if s != target {
            return Err(Error::ShapeMismatch {
                op: "aggregate_block_input",
                left: target,
                right: s,
            });
        }
    }
    let mut terms = Vec::with_capacity(l + 1);
    for (i, (&w, state)) in weights.iter().zip(states.iter_mut()).enumerate() {
        let normed = cache.shared_normalize(tape, SourceId(i), state, mode)?;
        terms.push(ds_apply(tape, normed, w)?);
    }
    terms.push(x_l);
    tape.add_n(&terms)
}

/// Unweighted, unnormalized `Y_{l-1} + ... + Y_0 + X_l`.
pub fn naive_dense_identity_sum<T: Scalar>(tape: &mut Tape<T>, history: &[Var], x_l: Var) -> Result<Var> {
    if history.is_empty() {
        return Ok(x_l);
    }
    let mut terms = history.to_vec();
    terms.push(x_l);
    tape.add_n(&terms)
}
