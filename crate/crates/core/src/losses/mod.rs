//! Loss terms. [`graph`] holds the differentiable versions used in training;
//! the free functions here evaluate the same code on plain tensors.

mod objective;

use asymgan_autograd::{Graph, Scalar, Tensor, TvSign};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::NetHandle;

pub(crate) use objective::combine;
pub use objective::{
    asym_objective, asym_objective_ext, cyclegan_objective, discriminator_pass, evaluate,
    evaluate_with_prior, generator_pass, sample_prior, Ablation, Fakes, LossBreakdown, Objective,
    Pass,
};

/// Feature layer of the perceptual losses.
pub const PERCEPTION_LAYER: usize = 2;

/// Relative weights of the objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub lambda7: f64,
    pub lambda8: f64,
    pub lambda9: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 10.0,
            lambda4: 10.0,
            lambda5: 1.0,
            lambda6: 1.0,
            lambda7: 0.2,
            lambda8: 0.1,
            lambda9: 10.0,
        }
    }
}

impl LossWeights {
    /// Defaults with the extension weights zeroed.
    pub fn without_extension() -> Self {
        Self {
            lambda5: 0.0,
            lambda6: 0.0,
            lambda7: 0.0,
            lambda8: 0.0,
            lambda9: 0.0,
            ..Self::default()
        }
    }

    pub fn as_array(&self) -> [f64; 9] {
        [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
            self.lambda7,
            self.lambda8,
            self.lambda9,
        ]
    }

    /// Sets `lambda<i>` by 1-based index.
    pub fn set(&mut self, index: usize, value: f64) -> Result<()> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Config(format!("lambda{index} must be finite and >= 0")));
        }
        let slot = match index {
            1 => &mut self.lambda1,
            2 => &mut self.lambda2,
            3 => &mut self.lambda3,
            4 => &mut self.lambda4,
            5 => &mut self.lambda5,
            6 => &mut self.lambda6,
            7 => &mut self.lambda7,
            8 => &mut self.lambda8,
            9 => &mut self.lambda9,
            _ => return Err(Error::Config(format!("no weight lambda{index}"))),
        };
        *slot = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.as_array().into_iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("lambda{} = {v} must be finite and >= 0", i + 1)));
            }
        }
        Ok(())
    }
}

/// Differentiable loss terms on a [`Graph`].
pub mod graph {
    use asymgan_autograd::{Graph, Scalar, TvSign, Var};

    use crate::error::Result;
    use crate::nets::NetHandle;

    /// `mean((real - 1)^2) + mean(fake^2)`.
    pub fn lsgan_d<S: Scalar>(g: &mut Graph<S>, real: Var, fake: Var) -> Result<Var> {
        let r = g.mse_to_const(real, S::one())?;
        let f = g.mse_to_const(fake, S::zero())?;
        Ok(g.add(r, f)?)
    }

    /// `mean((fake - 1)^2)`.
    pub fn lsgan_g<S: Scalar>(g: &mut Graph<S>, fake: Var) -> Result<Var> {
        Ok(g.mse_to_const(fake, S::one())?)
    }

    pub fn cycle_l1<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
        Ok(g.mean_abs_diff(a, b)?)
    }

    pub fn gram_matrix<S: Scalar>(g: &mut Graph<S>, feature: Var) -> Result<Var> {
        Ok(g.gram(feature)?)
    }

    pub fn total_variation<S: Scalar>(g: &mut Graph<S>, image: Var, sign: TvSign) -> Result<Var> {
        Ok(g.total_variation(image, sign)?)
    }

    /// The feature stack bound once on a graph as frozen constants.
    pub struct Perceptor<'a, S> {
        net: &'a NetHandle<S>,
        params: Vec<Var>,
        layer: usize,
    }

    impl<'a, S: Scalar> Perceptor<'a, S> {
        pub fn new(g: &mut Graph<S>, net: &'a NetHandle<S>, layer: usize) -> Self {
            let params = net.bind(g, false);
            Self { net, params, layer }
        }

        pub fn features(&self, g: &mut Graph<S>, image: Var) -> Result<Var> {
            self.net.forward_to_tap(g, &self.params, image, self.layer)
        }

        /// Mean squared feature distance, `‖φ(a) − φ(b)‖² / (C H W)` per sample.
        pub fn content(&self, g: &mut Graph<S>, generated: Var, reference: Var) -> Result<Var> {
            let a = self.features(g, generated)?;
            let b = self.features(g, reference)?;
            Ok(g.mean_sq_diff(a, b)?)
        }

        /// Squared Frobenius distance of Gram matrices, averaged over the batch.
        pub fn style(&self, g: &mut Graph<S>, generated: Var, reference: Var) -> Result<Var> {
            let a = self.features(g, generated)?;
            let b = self.features(g, reference)?;
            let ga = g.gram(a)?;
            let gb = g.gram(b)?;
            Ok(g.batch_sum_sq_diff(ga, gb)?)
        }
    }
}

fn scalar_of<S: Scalar>(
    inputs: &[&Tensor<S>],
    f: impl FnOnce(&mut Graph<S>, &[asymgan_autograd::Var]) -> Result<asymgan_autograd::Var>,
) -> Result<S> {
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

fn non_empty<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<()> {
    if t.numel() == 0 {
        Err(Error::Argument(format!("{what}: empty tensor")))
    } else {
        Ok(())
    }
}

pub fn lsgan_d_loss<S: Scalar>(real: &Tensor<S>, fake: &Tensor<S>) -> Result<S> {
    non_empty(real, "lsgan_d_loss")?;
    non_empty(fake, "lsgan_d_loss")?;
    scalar_of(&[real, fake], |g, v| graph::lsgan_d(g, v[0], v[1]))
}

pub fn lsgan_g_loss<S: Scalar>(fake: &Tensor<S>) -> Result<S> {
    non_empty(fake, "lsgan_g_loss")?;
    scalar_of(&[fake], |g, v| graph::lsgan_g(g, v[0]))
}

pub fn cycle_l1<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    scalar_of(&[a, b], |g, v| graph::cycle_l1(g, v[0], v[1]))
}

/// Per-sample `C×C` Gram matrices of a `B×C×H×W` feature map.
pub fn gram_matrix<S: Scalar>(feature: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let v = g.constant(feature.clone());
    let out = graph::gram_matrix(&mut g, v)?;
    Ok(g.value(out).clone())
}

pub fn total_variation<S: Scalar>(image: &Tensor<S>, sign: TvSign) -> Result<S> {
    scalar_of(&[image], |g, v| graph::total_variation(g, v[0], sign))
}

pub fn perception_content<S: Scalar>(
    phi: &NetHandle<S>,
    generated: &Tensor<S>,
    label: &Tensor<S>,
    layer: usize,
) -> Result<S> {
    scalar_of(&[generated, label], |g, v| {
        graph::Perceptor::new(g, phi, layer).content(g, v[0], v[1])
    })
}

pub fn perception_style<S: Scalar>(
    phi: &NetHandle<S>,
    generated: &Tensor<S>,
    photo: &Tensor<S>,
    layer: usize,
) -> Result<S> {
    scalar_of(&[generated, photo], |g, v| {
        graph::Perceptor::new(g, phi, layer).style(g, v[0], v[1])
    })
}

/// Features of the frozen stack at tap `layer` (1-based).
pub fn feature_extractor<S: Scalar>(phi: &NetHandle<S>, image: &Tensor<S>, layer: usize) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let params = phi.bind(&mut g, false);
    let x = g.constant(image.clone());
    let out = phi.forward_to_tap(&mut g, &params, x, layer)?;
    Ok(g.value(out).clone())
}
