//! Numerical checks of the dense-connectivity identities and of backward.

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{Network, NetworkConfig};
use crate::autograd::{OpKind, Tape};
use crate::norm::{Mode, NormKind};
use crate::error::{Error, Result};
use crate::gradcheck::relative_error;
use crate::kernels::conv2d;
use crate::tensor::Tensor;

/// Outcome of one comparison: passes when `max_abs_diff <= tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub case: String,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl EquivalenceReport {
    pub fn new(case: impl Into<String>, max_abs_diff: f64, tolerance: f64) -> Self {
        Self {
            case: case.into(),
            max_abs_diff,
            tolerance,
            passed: max_abs_diff <= tolerance,
        }
    }
}

/// Absolute tolerance of the 64-bit equivalence checks.
pub const EQUIVALENCE_TOL: f64 = 1e-12;

/// Input-channel slice `[start, start + len)` of a kernel.
fn kernel_slice(h: &Tensor<f64>, start: usize, len: usize) -> Result<Tensor<f64>> {
    let [co, ci, kh, kw] = h.dims();
    let mut out = Vec::with_capacity(co * len * kh * kw);
    for o in 0..co {
        let base = (o * ci + start) * kh * kw;
        out.extend_from_slice(&h.data()[base..base + len * kh * kw]);
    }
    Tensor::from_vec([co, len, kh, kw], out)
}

/// Convolution over channel-concatenated sources against the sum of
/// per-source convolutions with the matching input-channel slices of `h`.
pub fn verify_concat_sum_equivalence(sources: &[Tensor<f64>], h: &Tensor<f64>, stride: usize, pad: usize) -> Result<EquivalenceReport> {
    let total: usize = sources.iter().map(|s| s.shape().c).sum();
    if total != h.shape().c {
        return Err(Error::ChannelMismatch {
            op: "concat_sum_equivalence",
            expected: h.shape().c,
            got: total,
        });
    }
    let refs: Vec<&Tensor<f64>> = sources.iter().collect();
    let concat = Tensor::concat_channels(&refs)?;
    let lhs = conv2d(&concat, h, stride, pad)?;

    let mut start = 0;
    let mut rhs: Option<Tensor<f64>> = None;
    for s in sources {
        let c = s.shape().c;
        let part = conv2d(s, &kernel_slice(h, start, c)?, stride, pad)?;
        start += c;
        rhs = Some(match rhs {
            None => part,
            Some(acc) => acc.add(&part)?,
        });
    }
    let rhs = rhs.ok_or_else(|| Error::InvalidConfig("no sources".into()))?;
    let diff = lhs.max_abs_diff(&rhs)?;
    Ok(EquivalenceReport::new(
        format!("concat-then-conv vs sum-of-slice-convs ({} sources)", sources.len()),
        diff,
        EQUIVALENCE_TOL,
    ))
}

/// `h * (x_0 + ... + x_k)` against `h * x_0 + ... + h * x_k`.
pub fn verify_shared_weight_equivalence(sources: &[Tensor<f64>], h: &Tensor<f64>, stride: usize, pad: usize) -> Result<EquivalenceReport> {
    let (first, rest) = sources
        .split_first()
        .ok_or_else(|| Error::InvalidConfig("no sources".into()))?;
    let mut summed = first.clone();
    for s in rest {
        summed.add_assign(s)?;
    }
    let lhs = conv2d(&summed, h, stride, pad)?;
    let mut rhs = conv2d(first, h, stride, pad)?;
    for s in rest {
        rhs.add_assign(&conv2d(s, h, stride, pad)?)?;
    }
    let diff = lhs.max_abs_diff(&rhs)?;
    Ok(EquivalenceReport::new(
        format!("conv-of-sum vs sum-of-convs ({} sources)", sources.len()),
        diff,
        EQUIVALENCE_TOL,
    ))
}

fn random_case(rng: &mut ChaCha8Rng, split_channels: bool) -> Result<(Vec<Tensor<f64>>, Tensor<f64>, usize, usize)> {
    let count = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=2);
    let side = rng.gen_range(3..=7);
    let k = [1, 3][rng.gen_range(0..2)];
    let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
    let stride = rng.gen_range(1..=2);
    let shared_c = rng.gen_range(1..=8);
    let mut sources = Vec::with_capacity(count);
    for _ in 0..count {
        let c = if split_channels { rng.gen_range(1..=8) } else { shared_c };
        sources.push(Tensor::uniform([n, c, side, side], -1.0, 1.0, rng)?);
    }
    let c_in = if split_channels {
        sources.iter().map(|s| s.shape().c).sum()
    } else {
        shared_c
    };
    let c_out = rng.gen_range(1..=8);
    let h = Tensor::uniform([c_out, c_in, k, k], -1.0, 1.0, rng)?;
    Ok((sources, h, stride, pad))
}

/// Randomized concat/sum cases: 1-4 sources, 1-8 channels, spatial 3-7.
pub fn fuzz_concat_sum(cases: usize, seed: u64) -> Result<Vec<EquivalenceReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .map(|_| {
            let (sources, h, stride, pad) = random_case(&mut rng, true)?;
            verify_concat_sum_equivalence(&sources, &h, stride, pad)
        })
        .collect()
}

/// Randomized shared-weight distributivity cases.
pub fn fuzz_shared_weight(cases: usize, seed: u64) -> Result<Vec<EquivalenceReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .map(|_| {
            let (sources, h, stride, pad) = random_case(&mut rng, false)?;
            verify_shared_weight_equivalence(&sources, &h, stride, pad)
        })
        .collect()
}

/// Exact coefficients of `X_0 .. X_l` in `Y_l` under the unweighted dense
/// identity recursion `Y_0 = X_0`, `Y_k = Y_{k-1} + ... + Y_0 + X_k`.
pub fn expand_dense_identity_coefficients(l: usize) -> Vec<BigUint> {
    // ys[k][j]: coefficient of X_j in Y_k
    let mut ys: Vec<Vec<BigUint>> = Vec::with_capacity(l + 1);
    for k in 0..=l {
        let mut row = vec![BigUint::zero(); l + 1];
        for prev in &ys {
            for (acc, c) in row.iter_mut().zip(prev) {
                *acc += c;
            }
        }
        row[k] += BigUint::one();
        ys.push(row);
    }
    ys.pop().unwrap_or_default()
}

/// The linear-coefficient expansion `X_l + X_{l-1} + 2 X_{l-2} + ... + l X_0`.
/// It agrees with the recursion only for `l <= 2`.
pub fn linear_closed_form_coefficients(l: usize) -> Vec<BigUint> {
    (0..=l)
        .map(|j| if j == l { BigUint::one() } else { BigUint::from(l - j) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub coord: usize,
    /// Finite-difference step actually used.
    pub step: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub max_rel_err: f64,
    /// Coordinates whose probes changed the activation pattern at the base step.
    pub kink_retries: usize,
    /// Coordinates discarded because every step changed the activation pattern.
    pub kink_skips: usize,
    /// Parameters for which fewer than the requested coordinates were usable.
    pub shortfall: Vec<String>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self, case: impl Into<String>) -> EquivalenceReport {
        EquivalenceReport {
            case: case.into(),
            max_abs_diff: self.max_rel_err,
            tolerance: self.tolerance,
            passed: self.passed,
        }
    }

    /// Entries belonging to parameters whose name contains `pattern`.
    pub fn entries_for<'a>(&'a self, pattern: &'a str) -> impl Iterator<Item = &'a GradCheckEntry> + 'a {
        self.entries.iter().filter(move |e| e.param.contains(pattern))
    }
}

/// Gradients below this magnitude are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Candidate coordinates drawn per requested coordinate.
const CANDIDATE_FACTOR: usize = 8;

/// Step reductions tried when a probe changes the activation pattern.
const STEP_DIVISORS: [f64; 3] = [1.0, 10.0, 100.0];

/// Compares train-mode backward against central differences at
/// `coords_per_param` sampled coordinates of every learnable parameter
/// (all coordinates of smaller parameters).
///
/// A central difference straddling a ReLU or max-pool switch does not
/// estimate the derivative at the point. When the `+h` or `-h` probe changes
/// the activation pattern the coordinate is retried with `h / 10` and
/// `h / 100`, and replaced by another sample if all three straddle a switch.
pub fn gradient_check(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    coords_per_param: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, base_pattern) = net.loss_with_pattern(input, labels)?;
    let (_, _, grads) = net.loss_and_gradients(input, labels)?;
    let mut probe = net.clone();
    let mut entries = Vec::new();
    let mut kink_skips = 0;
    let mut kink_retries = 0;
    let mut shortfall = Vec::new();
    for i in 0..net.params().len() {
        let info = &net.params()[i];
        if !info.learnable {
            continue;
        }
        let numel = info.numel();
        let wanted = coords_per_param.min(numel);
        let candidates = sample(&mut rng, numel, numel.min(coords_per_param * CANDIDATE_FACTOR)).into_vec();
        let mut accepted = 0;
        for c in candidates {
            if accepted == wanted {
                break;
            }
            let orig = net.values()[i].data()[c];
            let mut found = None;
            for (k, div) in STEP_DIVISORS.iter().enumerate() {
                let step = h / div;
                let mut eval = |v: f64| {
                    probe.values_mut()[i].data_mut()[c] = v;
                    probe.loss_with_pattern(input, labels)
                };
                let (plus, pat_plus) = eval(orig + step)?;
                let (minus, pat_minus) = eval(orig - step)?;
                probe.values_mut()[i].data_mut()[c] = orig;
                if pat_plus == base_pattern && pat_minus == base_pattern {
                    found = Some((step, (plus - minus) / (2.0 * step)));
                    break;
                }
                if k == 0 {
                    kink_retries += 1;
                }
            }
            let Some((step, numeric)) = found else {
                kink_skips += 1;
                continue;
            };
            let analytic = grads[i].data()[c];
            entries.push(GradCheckEntry {
                param: info.name.clone(),
                coord: c,
                step,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric, GRADCHECK_FLOOR),
            });
            accepted += 1;
        }
        if accepted < wanted {
            shortfall.push(info.name.clone());
        }
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let passed = shortfall.is_empty() && entries.iter().all(|e| e.rel_err <= tol);
    Ok(GradCheckReport {
        entries,
        tolerance: tol,
        max_rel_err,
        kink_retries,
        kink_skips,
        shortfall,
        passed,
    })
}

/// Normalizations and source counts observed in one train-mode forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NormalizationEconomy {
    /// Shortcut normalizations on the tape (all normalize ops minus backbone BN).
    pub shortcut_normalize_ops: usize,
    /// Distinct sources consumed by at least one shortcut.
    pub consumed_sources: usize,
    /// Weighted shortcut terms summed into block inputs.
    pub shortcut_terms: usize,
    /// `blocks - 1` sources per stage and per shortcut family.
    pub expected_sources: usize,
}

impl NormalizationEconomy {
    pub fn passed(&self) -> bool {
        self.shortcut_normalize_ops == self.consumed_sources && self.consumed_sources == self.expected_sources
    }

    pub fn report(&self, case: impl Into<String>) -> EquivalenceReport {
        let diff = self.shortcut_normalize_ops.abs_diff(self.expected_sources)
            + self.consumed_sources.abs_diff(self.expected_sources);
        EquivalenceReport::new(case, diff as f64, 0.0)
    }
}

/// Runs `cfg` forward once and counts how often shortcut sources were normalized.
pub fn measure_normalization_economy(cfg: &NetworkConfig, batch: usize, seed: u64) -> Result<NormalizationEconomy> {
    if cfg.shortcut_norm.kind == NormKind::None {
        return Err(Error::InvalidConfig("shortcut normalization kind `none` records no normalize ops".into()));
    }
    let mut net = Network::<f64>::build(cfg, seed)?;
    let side = cfg.input_side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let x = Tensor::<f64>::uniform([batch, 3, side, side], -1.0, 1.0, &mut rng)?;
    let mut tape = Tape::no_grad();
    net.forward(&mut tape, &x, Mode::Train)?;
    let stages = cfg.stages()?;
    let backbone_bn = 1 + stages.iter().map(|s| 3 * s.blocks + 1).sum::<usize>();
    let families = usize::from(cfg.variant.dense_sources().is_some()) + usize::from(cfg.variant.has_inner_shortcuts());
    let stats = net.last_forward_stats();
    Ok(NormalizationEconomy {
        shortcut_normalize_ops: tape.op_count(OpKind::Normalize) - backbone_bn,
        consumed_sources: stats.consumed_sources,
        shortcut_terms: stats.shortcut_terms,
        expected_sources: families * stages.iter().map(|s| s.blocks - 1).sum::<usize>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn big(v: &[u64]) -> Vec<BigUint> {
        v.iter().map(|&x| BigUint::from(x)).collect()
    }

    #[test]
    fn coefficients_small_depths() {
        assert_eq!(expand_dense_identity_coefficients(0), big(&[1]));
        assert_eq!(expand_dense_identity_coefficients(1), big(&[1, 1]));
        assert_eq!(expand_dense_identity_coefficients(2), big(&[2, 1, 1]));
        assert_eq!(expand_dense_identity_coefficients(3), big(&[4, 2, 1, 1]));
        assert_eq!(linear_closed_form_coefficients(2), big(&[2, 1, 1]));
        assert_eq!(linear_closed_form_coefficients(3), big(&[3, 2, 1, 1]));
    }

    #[test]
    fn single_source_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform([1, 3, 5, 5], -1.0, 1.0, &mut rng).unwrap();
        let h = Tensor::uniform([2, 3, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let r = verify_concat_sum_equivalence(std::slice::from_ref(&x), &h, 1, 1).unwrap();
        assert_eq!(r.max_abs_diff, 0.0);
        let r = verify_shared_weight_equivalence(std::slice::from_ref(&x), &h, 1, 1).unwrap();
        assert_eq!(r.max_abs_diff, 0.0);
    }

    #[test]
    fn channel_sum_mismatch() {
        let x = Tensor::<f64>::ones([1, 2, 3, 3]).unwrap();
        let h = Tensor::<f64>::ones([1, 3, 1, 1]).unwrap();
        assert!(verify_concat_sum_equivalence(&[x], &h, 1, 0).is_err());
    }
}
