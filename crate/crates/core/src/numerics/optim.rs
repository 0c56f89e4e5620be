use crate::numerics::{NumericsError, Tensor};
use crate::scalar::Scalar;

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// One step applies `p <- p * (1 - lr * wd)` and then the bias-corrected
/// moment update `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`. The decay term
/// never passes through the moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    /// State for parameters with the given element counts.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: S::from_f64_lossy(0.9),
            beta2: S::from_f64_lossy(0.999),
            eps: S::from_f64_lossy(1e-8),
            step: 0,
            first: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut [Tensor<S>],
        grads: &[Tensor<S>],
        lr: S,
        weight_decay: S,
    ) -> Result<(), NumericsError> {
        if !(lr >= S::zero()) || !lr.is_finite() {
            return Err(NumericsError::InvalidArgument(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        if !(weight_decay >= S::zero()) || !weight_decay.is_finite() {
            return Err(NumericsError::InvalidArgument(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "optimizer_step",
                expected: vec![self.first.len()],
                got: vec![params.len(), grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "optimizer_step",
                    expected: vec![self.first[i].len()],
                    got: p.shape().to_vec(),
                });
            }
            p.check_same_shape(g, "optimizer_step")?;
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let decay = S::one() - lr * weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (S::one() - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (S::one() - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
