//! Central finite differences, the reference for analytic gradients.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(f(p + h) - f(p - h)) / 2h` for a scalar function of a scalar.
pub fn central_difference<T: Scalar>(mut f: impl FnMut(T) -> T, p: T, h: T) -> T {
    let plus = f(p + h);
    let minus = f(p - h);
    (plus - minus) / (h + h)
}

/// Estimates the gradient of `f` at `p` along every coordinate of `p`.
///
/// `f` must be deterministic; `p` is restored before returning.
pub fn finite_diff_gradient<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, p: &mut Tensor<T>, h: T) -> Tensor<T> {
    let coords: Vec<usize> = (0..p.numel()).collect();
    let values = finite_diff_at(&mut f, p, h, &coords);
    let mut out = Tensor::zeros_like(p);
    out.data_mut().copy_from_slice(&values);
    out
}

/// Estimates the gradient of `f` at `p` along the listed flat coordinates.
pub fn finite_diff_at<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, p: &mut Tensor<T>, h: T, coords: &[usize]) -> Vec<T> {
    coords
        .iter()
        .map(|&i| {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let plus = f(p);
            p.data_mut()[i] = orig - h;
            let minus = f(p);
            p.data_mut()[i] = orig;
            (plus - minus) / (h + h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let d = central_difference(|p: f64| p * p, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-9);
    }

    #[test]
    fn linear_is_exact() {
        let mut p = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let coef = [2.0, -3.0, 0.25];
        for h in [1e-5, 1e-2, 1.0] {
            let g = finite_diff_gradient(
                |t| t.data().iter().zip(coef).map(|(a, b)| a * b).sum(),
                &mut p,
                h,
            );
            for (gv, cv) in g.data().iter().zip(coef) {
                assert!((gv - cv).abs() < 1e-10);
            }
        }
        assert_eq!(p.data(), &[0.5, -1.0, 2.0]);
    }
}
