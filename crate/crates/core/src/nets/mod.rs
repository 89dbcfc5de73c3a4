//! Network architectures as immutable layer topologies plus named parameters.
//!
//! A [`NetHandle`] is interpreted on an autodiff [`Graph`], so the same
//! description serves training, inference and gradient checks.

mod build;
mod layers;

use asymgan_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use build::{
    build_code_discriminator, build_encoder, build_feature_extractor, build_generator_f,
    build_generator_g, build_patch_discriminator, build_segmenter, FEATURE_LAYERS, FEATURE_SEED,
};
pub use layers::Layer;

/// Width and depth of the translation networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub n_res_blocks: usize,
    pub norm_epsilon: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            base_channels: 64,
            in_channels: 3,
            out_channels: 3,
            n_res_blocks: 6,
            norm_epsilon: 1e-5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.base_channels < 4 {
            return Err(Error::Config("base_channels must be at least 4".into()));
        }
        if self.n_res_blocks == 0 {
            return Err(Error::Config("n_res_blocks must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::Config("norm_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Shape family of the auxiliary code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ZForm {
    /// `channels × H/8 × W/8`, the encoder output grid.
    Spatial { channels: usize },
    Vector { dim: usize },
}

impl ZForm {
    pub const SPATIAL: ZForm = ZForm::Spatial { channels: 8 };
    pub const VECTOR: ZForm = ZForm::Vector { dim: 8 };

    /// Channels (spatial) or length (vector) of the code.
    pub fn width(&self) -> usize {
        match *self {
            ZForm::Spatial { channels } => channels,
            ZForm::Vector { dim } => dim,
        }
    }

    /// Code shape for a batch of `h × w` images.
    pub fn code_shape(&self, batch: usize, h: usize, w: usize) -> Vec<usize> {
        match *self {
            ZForm::Spatial { channels } => {
                vec![batch, channels, code_grid(h), code_grid(w)]
            }
            ZForm::Vector { dim } => vec![batch, dim],
        }
    }
}

/// Spatial size after the encoder's three `k3 s2 p1` downsamplings.
pub fn code_grid(n: usize) -> usize {
    (0..3).fold(n, |n, _| n.div_ceil(2))
}

/// Where the code enters the backward generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZInjection {
    ConcatMid,
    ConcatAllDecoder,
    Cin,
}

impl ZInjection {
    pub fn default_zform(self) -> ZForm {
        match self {
            ZInjection::ConcatMid => ZForm::SPATIAL,
            ZInjection::ConcatAllDecoder | ZInjection::Cin => ZForm::VECTOR,
        }
    }

    pub fn check(self, zform: ZForm) -> Result<()> {
        let ok = matches!(
            (self, zform),
            (ZInjection::ConcatMid, ZForm::Spatial { .. })
                | (ZInjection::ConcatAllDecoder, ZForm::Vector { .. })
                | (ZInjection::Cin, ZForm::Vector { .. })
        );
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{self:?} is incompatible with {zform:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetRole {
    GeneratorG,
    GeneratorF,
    Encoder,
    PatchDiscriminator,
    CodeDiscriminator,
    FeatureExtractor,
    Segmenter,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Counts of the structural stages in a topology.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TopologySummary {
    pub downsampling: usize,
    pub residual_blocks: usize,
    pub upsampling: usize,
    pub conditional_norms: usize,
}

/// One instantiated network: role, topology and parameters.
#[derive(Clone, Debug)]
pub struct NetHandle<S> {
    role: NetRole,
    zform: Option<ZForm>,
    injection: Option<ZInjection>,
    norm_epsilon: f64,
    layers: Vec<Layer>,
    params: ParamStore<S>,
}

impl<S: Scalar> NetHandle<S> {
    pub(crate) fn from_parts(
        role: NetRole,
        zform: Option<ZForm>,
        injection: Option<ZInjection>,
        norm_epsilon: f64,
        layers: Vec<Layer>,
        params: ParamStore<S>,
    ) -> Self {
        Self {
            role,
            zform,
            injection,
            norm_epsilon,
            layers,
            params,
        }
    }

    pub fn role(&self) -> NetRole {
        self.role
    }

    pub fn zform(&self) -> Option<ZForm> {
        self.zform
    }

    pub fn injection(&self) -> Option<ZInjection> {
        self.injection
    }

    pub fn topology(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Whether `forward` needs a code argument.
    pub fn takes_code(&self) -> bool {
        layers::uses_code(&self.layers)
    }

    pub fn summary(&self) -> TopologySummary {
        let mut s = TopologySummary::default();
        layers::summarize(&self.layers, &mut s);
        s
    }

    /// Receptive field of one output unit, for purely sequential conv stacks.
    pub fn receptive_field(&self) -> Option<usize> {
        layers::receptive_field(&self.layers)
    }

    /// Copy with every conditional norm replaced by plain instance norm.
    pub fn without_modulation(&self) -> Self {
        let mut out = self.clone();
        out.layers = layers::strip_modulation(&self.layers);
        out
    }

    /// Places the parameters on `g` as leaves.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Vec<Var> {
        self.params
            .values()
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph<S>,
        params: &[Var],
        x: Var,
        code: Option<Var>,
    ) -> Result<Var> {
        self.check_code(code.is_some())?;
        layers::run(g, &self.layers, params, x, code, self.eps(), None)
    }

    /// Runs up to and including the `tap`-th tap marker (1-based).
    pub fn forward_to_tap(&self, g: &mut Graph<S>, params: &[Var], x: Var, tap: usize) -> Result<Var> {
        let taps = layers::count_taps(&self.layers);
        if tap == 0 || tap > taps {
            return Err(Error::Argument(format!(
                "feature layer {tap} outside 1..={taps}"
            )));
        }
        layers::run(g, &self.layers, params, x, None, self.eps(), Some(tap))
    }

    /// Stand-alone forward pass with frozen parameters.
    pub fn apply(&self, x: &Tensor<S>, code: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let cv = code.map(|c| g.constant(c.clone()));
        let out = self.forward(&mut g, &params, xv, cv)?;
        Ok(g.value(out).clone())
    }

    fn eps(&self) -> S {
        S::lit(self.norm_epsilon)
    }

    fn check_code(&self, given: bool) -> Result<()> {
        match (self.takes_code(), given) {
            (true, false) => Err(Error::Argument(format!("{:?} requires a code", self.role))),
            (false, true) => Err(Error::Argument(format!("{:?} takes no code", self.role))),
            _ => Ok(()),
        }
    }
}
