//! Adaptive-moment optimizer.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<S>>,
    pub second: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let first: Vec<Tensor<S>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// Applies one update. Parameters without a gradient keep their value
    /// but still see their moments decay.
    pub fn update(
        &mut self,
        params: &mut [Tensor<S>],
        grads: &[Option<Tensor<S>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::InvalidArgument(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let c = self.config;
        let b1 = S::lit(c.beta1);
        let b2 = S::lit(c.beta2);
        let step_size = S::lit(lr / (1.0 - c.beta1.powf(t)));
        let bias2 = S::lit((1.0 - c.beta2.powf(t)).sqrt());
        let eps = S::lit(c.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let zero;
            let g = match g {
                Some(g) => {
                    p.expect_same_shape(g, "adam")?;
                    g
                }
                None => {
                    zero = Tensor::zeros(p.shape().to_vec());
                    &zero
                }
            };
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let denom = vv.sqrt() / bias2 + eps;
                *pv -= step_size * *mv / denom;
            }
        }
        Ok(())
    }
}
