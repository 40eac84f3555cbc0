//! AdamW with decoupled weight decay, plus the linear learning-rate decay
//! schedule.

use super::{NnError, ParamSet, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moments and the step counter.
#[derive(Debug, Clone)]
pub struct OptState<F> {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    decay: Vec<bool>,
}

impl<F: Scalar> OptState<F> {
    /// Decay applies to every tensor of rank two or more (matrices and
    /// embedding tables); biases and norm parameters are exempt.
    pub fn new(params: &ParamSet<F>, config: AdamWConfig) -> Self {
        let decay = params
            .tensors()
            .iter()
            .map(|t| t.shape().len() >= 2)
            .collect();
        Self::with_decay_mask(params, config, decay)
    }

    pub fn with_decay_mask(params: &ParamSet<F>, config: AdamWConfig, decay: Vec<bool>) -> Self {
        OptState {
            config,
            step: 0,
            first: params
                .tensors()
                .iter()
                .map(|t| vec![F::ZERO; t.len()])
                .collect(),
            second: params
                .tensors()
                .iter()
                .map(|t| vec![F::ZERO; t.len()])
                .collect(),
            decay,
        }
    }

    /// One AdamW update at learning rate `lr`.
    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &[Tensor<F>],
        lr: f64,
    ) -> Result<(), NnError> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} gradients / {} moment sets for {} parameters",
                grads.len(),
                self.first.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.by_index(i).shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    params.name(i),
                    params.by_index(i).shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (F::from_f64(1.0 / bc1), F::from_f64(1.0 / bc2));
        let lr_f = F::from_f64(lr);
        let eps = F::from_f64(c.eps);

        for (i, g) in grads.iter().enumerate() {
            let shrink = if self.decay[i] {
                F::from_f64(1.0 - lr * c.weight_decay)
            } else {
                F::ONE
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let w = params.by_index_mut(i).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                w[j] = w[j] * shrink - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `base_lr * (1 - step / total_steps)`, floored at zero.
pub fn linear_decay_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    (base_lr * (1.0 - step as f64 / total_steps as f64)).max(0.0)
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.to_f64() * x.to_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::from_f64(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
