//! Central finite differences, used as the independent oracle for the tape.

use crate::numerics::Tensor;

/// Denominator floor for [`relative_error`]; keeps exact-zero gradients from
/// dividing rounding noise by zero.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `(f(p + h e) - f(p - h e)) / 2h` for one scalar coordinate `e` of
/// `params[tensor][element]`. `f` must be a pure function of `params`.
pub fn central_difference<F>(
    mut f: F,
    params: &[Tensor<f64>],
    tensor: usize,
    element: usize,
    h: f64,
) -> f64
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut shifted = params.to_vec();
    let base = params[tensor].data()[element];
    shifted[tensor].data_mut()[element] = base + h;
    let plus = f(&shifted);
    shifted[tensor].data_mut()[element] = base - h;
    let minus = f(&shifted);
    (plus - minus) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let p = vec![Tensor::row(vec![2.0])];
        let d = central_difference(|ps| ps[0].data()[0].powi(3), &p, 0, 0, 1e-3);
        // Central difference on x^3 carries an h^2 term exactly.
        assert!((d - (12.0 + 1e-6)).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1.0, 1.0 + 1e-6) < 1.1e-6);
    }
}
