use asymgan_autograd::{ConvGeom, Graph, Pad4, Scalar, Var};

use super::TopologySummary;
use crate::error::{Error, Result};

/// One node of a network topology. Parameter fields are indices into the
/// owning [`super::ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    ReflectPad(usize),
    Conv { w: usize, b: Option<usize>, geom: ConvGeom },
    /// Transposed conv; the output size is popped from the size stack.
    ConvTranspose { w: usize, b: Option<usize>, geom: ConvGeom },
    /// Records the current spatial size for a later [`Layer::ConvTranspose`].
    PushSize,
    InstanceNorm,
    /// Instance norm with per-channel scale and shift predicted from the code.
    CondNorm { gamma_w: usize, gamma_b: usize, beta_w: usize, beta_b: usize },
    Relu,
    LeakyRelu(f64),
    Tanh,
    /// `x + body(x)`; with `inject` the body sees `x` concatenated with the code.
    Residual { inject: bool, body: Vec<Layer> },
    /// Nearest-resizes a spatial code to the current grid and concatenates it.
    InjectSpatial,
    /// Broadcasts a vector code over the current grid and concatenates it.
    InjectVector,
    GlobalAvgPool,
    Linear { w: usize, b: Option<usize> },
    /// Marks a feature-extraction output.
    Tap,
}

struct State<'a, S: Scalar> {
    params: &'a [Var],
    code: Option<Var>,
    eps: S,
    sizes: Vec<(usize, usize)>,
    taps: usize,
    stop_at: Option<usize>,
}

impl<S: Scalar> State<'_, S> {
    fn param(&self, i: usize) -> Result<Var> {
        self.params
            .get(i)
            .copied()
            .ok_or_else(|| Error::Argument(format!("parameter index {i} not bound")))
    }

    fn code(&self) -> Result<Var> {
        self.code
            .ok_or_else(|| Error::Argument("layer needs a code but none was given".into()))
    }
}

pub(super) fn run<S: Scalar>(
    g: &mut Graph<S>,
    layers: &[Layer],
    params: &[Var],
    x: Var,
    code: Option<Var>,
    eps: S,
    stop_at: Option<usize>,
) -> Result<Var> {
    let mut st = State {
        params,
        code,
        eps,
        sizes: Vec::new(),
        taps: 0,
        stop_at,
    };
    let (out, _) = run_seq(g, layers, x, &mut st)?;
    Ok(out)
}

/// Returns the output and whether a stop tap was reached.
fn run_seq<S: Scalar>(
    g: &mut Graph<S>,
    layers: &[Layer],
    mut x: Var,
    st: &mut State<'_, S>,
) -> Result<(Var, bool)> {
    for layer in layers {
        x = match layer {
            Layer::ReflectPad(p) => g.reflect_pad(x, Pad4::uniform(*p))?,
            Layer::Conv { w, b, geom } => {
                let b = b.map(|i| st.param(i)).transpose()?;
                g.conv2d(x, st.param(*w)?, b, *geom)?
            }
            Layer::ConvTranspose { w, b, geom } => {
                let out_hw = st
                    .sizes
                    .pop()
                    .ok_or_else(|| Error::Argument("size stack underflow".into()))?;
                let b = b.map(|i| st.param(i)).transpose()?;
                g.conv_transpose2d(x, st.param(*w)?, b, *geom, out_hw)?
            }
            Layer::PushSize => {
                let (_, _, h, w) = g.value(x).dims4()?;
                st.sizes.push((h, w));
                x
            }
            Layer::InstanceNorm => g.instance_norm(x, st.eps)?,
            Layer::CondNorm {
                gamma_w,
                gamma_b,
                beta_w,
                beta_b,
            } => {
                let z = st.code()?;
                let gamma = g.linear(z, st.param(*gamma_w)?, Some(st.param(*gamma_b)?))?;
                let beta = g.linear(z, st.param(*beta_w)?, Some(st.param(*beta_b)?))?;
                let n = g.instance_norm(x, st.eps)?;
                g.channel_affine(n, gamma, beta)?
            }
            Layer::Relu => g.relu(x),
            Layer::LeakyRelu(slope) => g.leaky_relu(x, S::lit(*slope)),
            Layer::Tanh => g.tanh(x),
            Layer::Residual { inject, body } => {
                let input = if *inject { inject_vector(g, x, st.code()?)? } else { x };
                let (y, _) = run_seq(g, body, input, st)?;
                g.add(x, y)?
            }
            Layer::InjectSpatial => {
                let z = st.code()?;
                let (_, _, h, w) = g.value(x).dims4()?;
                let zs = g.value(z).shape();
                if zs.len() != 4 || zs[2] != h.div_ceil(2) || zs[3] != w.div_ceil(2) {
                    return Err(Error::Argument(format!(
                        "spatial code of shape {zs:?} does not match the {h}x{w} feature grid"
                    )));
                }
                let up = g.upsample_nearest(z, h, w)?;
                g.concat(&[x, up])?
            }
            Layer::InjectVector => inject_vector(g, x, st.code()?)?,
            Layer::GlobalAvgPool => g.global_avg_pool(x)?,
            Layer::Linear { w, b } => {
                let b = b.map(|i| st.param(i)).transpose()?;
                g.linear(x, st.param(*w)?, b)?
            }
            Layer::Tap => {
                st.taps += 1;
                if st.stop_at == Some(st.taps) {
                    return Ok((x, true));
                }
                x
            }
        };
    }
    Ok((x, false))
}

fn inject_vector<S: Scalar>(g: &mut Graph<S>, x: Var, z: Var) -> Result<Var> {
    let (_, _, h, w) = g.value(x).dims4()?;
    if g.value(z).ndim() != 2 {
        return Err(Error::Argument(format!(
            "vector code expected, got shape {:?}",
            g.value(z).shape()
        )));
    }
    let zb = g.broadcast_spatial(z, h, w)?;
    Ok(g.concat(&[x, zb])?)
}

pub(super) fn uses_code(layers: &[Layer]) -> bool {
    layers.iter().any(|l| match l {
        Layer::CondNorm { .. } | Layer::InjectSpatial | Layer::InjectVector => true,
        Layer::Residual { inject, body } => *inject || uses_code(body),
        _ => false,
    })
}

pub(super) fn count_taps(layers: &[Layer]) -> usize {
    layers.iter().filter(|l| matches!(l, Layer::Tap)).count()
}

pub(super) fn summarize(layers: &[Layer], s: &mut TopologySummary) {
    for l in layers {
        match l {
            Layer::Conv { geom, .. } if geom.stride > 1 => s.downsampling += 1,
            Layer::ConvTranspose { .. } => s.upsampling += 1,
            Layer::CondNorm { .. } => s.conditional_norms += 1,
            Layer::Residual { body, .. } => {
                s.residual_blocks += 1;
                summarize(body, s);
            }
            _ => {}
        }
    }
}

pub(super) fn receptive_field(layers: &[Layer]) -> Option<usize> {
    let (mut field, mut jump) = (1usize, 1usize);
    for l in layers {
        match l {
            Layer::Conv { geom, .. } => {
                field += (geom.kernel - 1) * geom.dilation * jump;
                jump *= geom.stride;
            }
            Layer::ReflectPad(_)
            | Layer::InstanceNorm
            | Layer::Relu
            | Layer::LeakyRelu(_)
            | Layer::Tanh
            | Layer::Tap => {}
            _ => return None,
        }
    }
    Some(field)
}

pub(super) fn strip_modulation(layers: &[Layer]) -> Vec<Layer> {
    layers
        .iter()
        .map(|l| match l {
            Layer::CondNorm { .. } => Layer::InstanceNorm,
            Layer::Residual { inject, body } => Layer::Residual {
                inject: *inject,
                body: strip_modulation(body),
            },
            other => other.clone(),
        })
        .collect()
}
