//! Forward kernels shared by the autodiff tape and the (tape-free) encoder.

use crate::numerics::{NumericsError, Tensor};
use crate::scalar::Scalar;

fn check_finite<S: Scalar>(v: &[S], op: &'static str) -> Result<(), NumericsError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`, all row-major.
///
/// The inner loop is an axpy over a contiguous row of `b`, which the compiler
/// vectorizes without reassociating any sum.
pub(crate) fn gemm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m x n] += a^T * b` with `a` stored `k x m` and `b` stored `k x n`.
pub(crate) fn gemm_at_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    k: usize,
    m: usize,
    n: usize,
) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == S::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

fn dims2<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `a * b` for `a: m x k`, `b: k x n`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NumericsError> {
    let (m, k) = dims2(a);
    let (k2, n) = dims2(b);
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            expected: vec![k, n],
            got: b.shape().to_vec(),
        });
    }
    let mut out = vec![S::zero(); m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::matrix(m, n, out)
}

/// `a^T * b` for `a: k x m`, `b: k x n`.
pub fn matmul_at<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NumericsError> {
    let (k, m) = dims2(a);
    let (k2, n) = dims2(b);
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul_at",
            expected: vec![k, n],
            got: b.shape().to_vec(),
        });
    }
    let mut out = vec![S::zero(); m * n];
    gemm_at_acc(a.data(), b.data(), &mut out, k, m, n);
    Tensor::matrix(m, n, out)
}

/// `a * b^T` for `a: m x k`, `b: n x k`.
pub fn matmul_bt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NumericsError> {
    if a.cols() != b.cols() {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul_bt",
            expected: vec![b.rows(), a.cols()],
            got: b.shape().to_vec(),
        });
    }
    matmul(a, &b.transpose())
}

/// Numerically stable softmax (the maximum is subtracted first).
pub fn softmax<S: Scalar>(v: &[S]) -> Result<Vec<S>, NumericsError> {
    check_finite(v, "softmax")?;
    if v.is_empty() {
        return Err(NumericsError::InvalidArgument(
            "softmax of an empty vector".into(),
        ));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked<S: Scalar>(v: &[S]) -> Vec<S> {
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    let mut out: Vec<S> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: S = out.iter().copied().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>, NumericsError> {
    check_finite(t.data(), "softmax_rows")?;
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = softmax_unchecked(t.row_slice(r));
        out.row_slice_mut(r).copy_from_slice(&row);
    }
    Ok(out)
}

/// Normalized row and its inverse standard deviation, before the affine map.
pub(crate) fn normalize<S: Scalar>(v: &[S], eps: S) -> (Vec<S>, S) {
    let n = S::from_usize_lossy(v.len());
    let mean = v.iter().copied().sum::<S>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
    let denom = (var + eps).sqrt();
    if denom == S::zero() {
        return (vec![S::zero(); v.len()], S::zero());
    }
    let inv = S::one() / denom;
    (v.iter().map(|&x| (x - mean) * inv).collect(), inv)
}

/// Layer normalization with population variance.
///
/// `eps = 0` is accepted; a constant row then normalizes to zeros.
pub fn layer_norm<S: Scalar>(
    v: &[S],
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> Result<Vec<S>, NumericsError> {
    if gamma.len() != v.len() || beta.len() != v.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            expected: vec![v.len()],
            got: vec![gamma.len(), beta.len()],
        });
    }
    if eps < S::zero() {
        return Err(NumericsError::InvalidArgument(
            "layer_norm eps must be nonnegative".into(),
        ));
    }
    let (xhat, _) = normalize(v, eps);
    Ok(xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&x, (&g, &b))| x * g + b)
        .collect())
}

pub fn layer_norm_rows<S: Scalar>(
    t: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> Result<Tensor<S>, NumericsError> {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let y = layer_norm(t.row_slice(r), gamma, beta, eps)?;
        out.row_slice_mut(r).copy_from_slice(&y);
    }
    Ok(out)
}

const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let k = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let c = S::from_f64_lossy(GELU_C);
    half * x * (S::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let k = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let c = S::from_f64_lossy(GELU_C);
    let three = S::from_f64_lossy(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (S::one() + three * c * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `log(sum(exp(v)))` with max subtraction.
pub(crate) fn log_sum_exp<S: Scalar>(v: &[S]) -> S {
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<S>().ln()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy<S: Scalar>(logits: &[S], label: usize) -> Result<S, NumericsError> {
    if label >= logits.len() {
        return Err(NumericsError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    check_finite(logits, "cross_entropy")?;
    Ok((log_sum_exp(logits) - logits[label]).max(S::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0f64, 0.0]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = softmax(&[2.0f64.ln(), 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
        let base = softmax(&[5.0f64, 5.0, 5.0]).unwrap();
        for c in [-100.0, 0.3, 1e3] {
            assert_eq!(softmax(&[5.0 + c, 5.0 + c, 5.0 + c]).unwrap(), base);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[f64::NAN, 0.0]),
            Err(NumericsError::NonFinite { .. })
        ));
        assert!(matches!(
            softmax(&[f64::INFINITY]),
            Err(NumericsError::NonFinite { .. })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        assert_eq!(
            layer_norm(&[1.0f64, -1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap(),
            vec![1.0, -1.0]
        );
        assert_eq!(
            layer_norm(&[7.5f64, 7.5], &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            layer_norm(&[7.5f64, 7.5], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            layer_norm(&[3.0f64, 5.0], &[2.0, 2.0], &[1.0, 1.0], 0.0).unwrap(),
            vec![-1.0, 3.0]
        );
        assert!(layer_norm(&[1.0f64, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&[0.0f64, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy(&[30.0f64, -30.0], 0).unwrap() < 1e-9);
        for k in 2..8usize {
            let l = cross_entropy(&vec![0.25f64; k], k - 1).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
        assert!(matches!(
            cross_entropy(&[0.0f64, 0.0], 2),
            Err(NumericsError::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::<f64>::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
        assert_eq!(matmul_at(&a.transpose(), &b).unwrap(), ab);
        assert_eq!(matmul_bt(&a, &b.transpose()).unwrap(), ab);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..64)) {
            let s = softmax(&v).unwrap();
            let total: f64 = s.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn layer_norm_standardizes(v in proptest::collection::vec(-10.0f64..10.0, 2..32)) {
            let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let ones = vec![1.0; v.len()];
            let zeros = vec![0.0; v.len()];
            let y = layer_norm(&v, &ones, &zeros, 1e-12).unwrap();
            let n = y.len() as f64;
            let mean: f64 = y.iter().sum::<f64>() / n;
            let var: f64 = y.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
