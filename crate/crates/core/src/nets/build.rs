use asymgan_autograd::{ConvGeom, Pad4, Scalar, Tensor};
use rand::Rng;

use super::{Layer, NetConfig, NetHandle, NetRole, ParamStore, ZForm, ZInjection};
use crate::error::Result;
use crate::rng::{stream_rng, Stream};

/// Seed of the frozen perceptual feature stack.
pub const FEATURE_SEED: u64 = 0x5EED_F00D;
/// Number of tap points exposed by the feature stack.
pub const FEATURE_LAYERS: usize = 4;

const INIT_STD: f64 = 0.02;
const LEAK: f64 = 0.2;

#[derive(Clone, Copy)]
enum Init {
    Gaussian,
    He,
}

struct Builder<'r, S, R: ?Sized> {
    params: ParamStore<S>,
    rng: &'r mut R,
    init: Init,
}

impl<'r, S: Scalar, R: Rng + ?Sized> Builder<'r, S, R> {
    fn new(rng: &'r mut R, init: Init) -> Self {
        Self {
            params: ParamStore::new(),
            rng,
            init,
        }
    }

    fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let std = match self.init {
            Init::Gaussian => INIT_STD,
            Init::He => (2.0 / fan_in as f64).sqrt(),
        };
        let t = Tensor::randn(shape, std, self.rng);
        self.params.push(name, t)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Layer {
        let k = geom.kernel;
        let w = self.weight(format!("{name}.w"), vec![cout, cin, k, k], cin * k * k);
        let b = self.params.push(format!("{name}.b"), Tensor::zeros([cout]));
        Layer::Conv { w, b: Some(b), geom }
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Layer {
        let k = geom.kernel;
        let w = self.weight(format!("{name}.w"), vec![cin, cout, k, k], cin * k * k);
        let b = self.params.push(format!("{name}.b"), Tensor::zeros([cout]));
        Layer::ConvTranspose { w, b: Some(b), geom }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Layer {
        let w = self.weight(format!("{name}.w"), vec![dout, din], din);
        let b = self.params.push(format!("{name}.b"), Tensor::zeros([dout]));
        Layer::Linear { w, b: Some(b) }
    }

    /// Conditional norm starting at the identity: gamma = 1, beta = 0.
    fn cond_norm(&mut self, name: &str, code: usize, channels: usize) -> Layer {
        let p = &mut self.params;
        let gamma_w = p.push(format!("{name}.gamma.w"), Tensor::zeros([channels, code]));
        let gamma_b = p.push(format!("{name}.gamma.b"), Tensor::full([channels], S::one()));
        let beta_w = p.push(format!("{name}.beta.w"), Tensor::zeros([channels, code]));
        let beta_b = p.push(format!("{name}.beta.b"), Tensor::zeros([channels]));
        Layer::CondNorm {
            gamma_w,
            gamma_b,
            beta_w,
            beta_b,
        }
    }

    fn residual(&mut self, name: &str, channels: usize, extra_in: usize, norm_code: Option<usize>) -> Layer {
        let mut body = vec![Layer::ReflectPad(1)];
        body.push(self.conv(&format!("{name}.conv1"), channels + extra_in, channels, k3s1()));
        body.push(match norm_code {
            Some(c) => self.cond_norm(&format!("{name}.norm1"), c, channels),
            None => Layer::InstanceNorm,
        });
        body.push(Layer::Relu);
        body.push(Layer::ReflectPad(1));
        body.push(self.conv(&format!("{name}.conv2"), channels, channels, k3s1()));
        body.push(match norm_code {
            Some(c) => self.cond_norm(&format!("{name}.norm2"), c, channels),
            None => Layer::InstanceNorm,
        });
        Layer::Residual {
            inject: extra_in > 0,
            body,
        }
    }
}

fn k3s1() -> ConvGeom {
    ConvGeom::new(3, 1, Pad4::ZERO)
}

fn down_geom() -> ConvGeom {
    ConvGeom::new(3, 2, Pad4::ZERO)
}

fn up_geom() -> ConvGeom {
    ConvGeom::new(3, 2, Pad4::uniform(1))
}

/// Shared resnet generator body; `code` selects the injection point.
fn generator<S: Scalar, R: Rng + ?Sized>(
    cfg: &NetConfig,
    role: NetRole,
    code: Option<(ZForm, ZInjection)>,
    rng: &mut R,
) -> Result<NetHandle<S>> {
    cfg.validate()?;
    if let Some((zform, inj)) = code {
        inj.check(zform)?;
    }
    let b = cfg.base_channels;
    let n = cfg.n_res_blocks;
    let zw = code.map_or(0, |(z, _)| z.width());
    let inj = code.map(|(_, i)| i);
    let mut bld = Builder::new(rng, Init::Gaussian);
    let mut layers = vec![Layer::ReflectPad(3)];
    layers.push(bld.conv("stem", cfg.in_channels, b, ConvGeom::new(7, 1, Pad4::ZERO)));
    layers.extend([Layer::InstanceNorm, Layer::Relu]);
    for (i, (ci, co)) in [(b, 2 * b), (2 * b, 4 * b)].into_iter().enumerate() {
        layers.extend([Layer::PushSize, Layer::ReflectPad(1)]);
        layers.push(bld.conv(&format!("down{i}"), ci, co, down_geom()));
        layers.extend([Layer::InstanceNorm, Layer::Relu]);
    }
    let mut c = 4 * b;
    let mid = n.div_ceil(2);
    let cin_start = (n - n.min(3)) / 2;
    for r in 0..n {
        if inj == Some(ZInjection::ConcatMid) && r == mid {
            layers.push(Layer::InjectSpatial);
            c += zw;
        }
        let cond = inj == Some(ZInjection::Cin) && (cin_start..cin_start + 3).contains(&r);
        layers.push(bld.residual(&format!("res{r}"), c, 0, cond.then_some(zw)));
    }
    if inj == Some(ZInjection::ConcatMid) && mid == n {
        layers.push(Layer::InjectSpatial);
        c += zw;
    }
    let all = inj == Some(ZInjection::ConcatAllDecoder);
    for (i, co) in [2 * b, b].into_iter().enumerate() {
        if all {
            layers.push(Layer::InjectVector);
        }
        let ci = if all { c + zw } else { c };
        layers.push(bld.conv_t(&format!("up{i}"), ci, co, up_geom()));
        layers.extend([Layer::InstanceNorm, Layer::Relu]);
        c = co;
    }
    if all {
        layers.push(Layer::InjectVector);
        c += zw;
    }
    layers.push(Layer::ReflectPad(3));
    layers.push(bld.conv("out", c, cfg.out_channels, ConvGeom::new(7, 1, Pad4::ZERO)));
    layers.push(Layer::Tanh);
    Ok(NetHandle::from_parts(
        role,
        code.map(|(z, _)| z),
        inj,
        cfg.norm_epsilon,
        layers,
        bld.params,
    ))
}

/// Forward generator `G: X → Y`.
pub fn build_generator_g<S: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<NetHandle<S>> {
    generator(cfg, NetRole::GeneratorG, None, rng)
}

/// Backward generator `F: (Y, Z) → X`; `None` builds the code-free baseline.
pub fn build_generator_f<S: Scalar, R: Rng + ?Sized>(
    cfg: &NetConfig,
    code: Option<(ZForm, ZInjection)>,
    rng: &mut R,
) -> Result<NetHandle<S>> {
    generator(cfg, NetRole::GeneratorF, code, rng)
}

/// Encoder `E: X → Z`. The downsampling stages are not normalized: instance
/// norm there would discard the global brightness and tint the code must carry.
pub fn build_encoder<S: Scalar, R: Rng + ?Sized>(
    cfg: &NetConfig,
    zform: ZForm,
    rng: &mut R,
) -> Result<NetHandle<S>> {
    cfg.validate()?;
    let b = cfg.base_channels;
    let mut bld = Builder::new(rng, Init::Gaussian);
    let mut layers = Vec::new();
    for (i, (ci, co)) in [(cfg.in_channels, b), (b, 2 * b), (2 * b, 4 * b)].into_iter().enumerate() {
        layers.push(Layer::ReflectPad(1));
        layers.push(bld.conv(&format!("down{i}"), ci, co, down_geom()));
        layers.push(Layer::Relu);
    }
    for r in 0..3 {
        layers.push(bld.residual(&format!("res{r}"), 4 * b, 0, None));
    }
    match zform {
        ZForm::Spatial { channels } => {
            layers.push(bld.conv("head", 4 * b, channels, ConvGeom::new(1, 1, Pad4::ZERO)));
        }
        ZForm::Vector { dim } => {
            layers.push(Layer::GlobalAvgPool);
            layers.push(bld.linear("head", 4 * b, dim));
        }
    }
    Ok(NetHandle::from_parts(
        NetRole::Encoder,
        Some(zform),
        None,
        cfg.norm_epsilon,
        layers,
        bld.params,
    ))
}

/// 70×70 PatchGAN. Output grid is `H/8 × W/8` for `H, W` divisible by 8.
pub fn build_patch_discriminator<S: Scalar, R: Rng + ?Sized>(
    cfg: &NetConfig,
    rng: &mut R,
) -> Result<NetHandle<S>> {
    cfg.validate()?;
    let b = cfg.base_channels;
    let mut bld = Builder::new(rng, Init::Gaussian);
    let s2 = ConvGeom::new(4, 2, Pad4::uniform(1));
    let s1 = ConvGeom::new(4, 1, Pad4::same(4));
    let mut layers = vec![bld.conv("c0", cfg.out_channels, b, s2), Layer::LeakyRelu(LEAK)];
    for (i, (ci, co, geom)) in [(b, 2 * b, s2), (2 * b, 4 * b, s2), (4 * b, 8 * b, s1)]
        .into_iter()
        .enumerate()
    {
        layers.push(bld.conv(&format!("c{}", i + 1), ci, co, geom));
        layers.extend([Layer::InstanceNorm, Layer::LeakyRelu(LEAK)]);
    }
    layers.push(bld.conv("score", 8 * b, 1, s1));
    Ok(NetHandle::from_parts(
        NetRole::PatchDiscriminator,
        None,
        None,
        cfg.norm_epsilon,
        layers,
        bld.params,
    ))
}

/// Code discriminator: a small PatchGAN over the code grid (10 cells, i.e.
/// 20 in ×2 upsampled coordinates) or an MLP scorer for vector codes.
pub fn build_code_discriminator<S: Scalar, R: Rng + ?Sized>(
    cfg: &NetConfig,
    zform: ZForm,
    rng: &mut R,
) -> Result<NetHandle<S>> {
    cfg.validate()?;
    let mut bld = Builder::new(rng, Init::Gaussian);
    let layers = match zform {
        ZForm::Spatial { channels } => {
            let w = 2 * cfg.base_channels;
            vec![
                bld.conv("c0", channels, w, ConvGeom::new(4, 2, Pad4::uniform(1))),
                Layer::LeakyRelu(LEAK),
                bld.conv("c1", w, w, ConvGeom::new(3, 1, Pad4::uniform(1))),
                Layer::InstanceNorm,
                Layer::LeakyRelu(LEAK),
                bld.conv("score", w, 1, ConvGeom::new(2, 1, Pad4::same(2))),
            ]
        }
        ZForm::Vector { dim } => vec![
            bld.linear("fc0", dim, 64),
            Layer::LeakyRelu(LEAK),
            bld.linear("fc1", 64, 64),
            Layer::LeakyRelu(LEAK),
            bld.linear("score", 64, 1),
        ],
    };
    Ok(NetHandle::from_parts(
        NetRole::CodeDiscriminator,
        Some(zform),
        None,
        cfg.norm_epsilon,
        layers,
        bld.params,
    ))
}

/// Frozen feature stack: four `3×3 s2` conv + ReLU stages with He-scaled
/// weights drawn from [`FEATURE_SEED`]. Stage `j` halves the size `j` times.
pub fn build_feature_extractor<S: Scalar>() -> NetHandle<S> {
    let mut rng = stream_rng(FEATURE_SEED, Stream::Init);
    let mut bld = Builder::new(&mut rng, Init::He);
    let mut layers = Vec::new();
    let geom = ConvGeom::new(3, 2, Pad4::uniform(1));
    for (j, (ci, co)) in [(3, 16), (16, 32), (32, 64), (64, 64)].into_iter().enumerate() {
        layers.push(bld.conv(&format!("f{}", j + 1), ci, co, geom));
        layers.extend([Layer::Relu, Layer::Tap]);
    }
    NetHandle::from_parts(NetRole::FeatureExtractor, None, None, 1e-5, layers, bld.params)
}

/// Dilated conv segmenter used as the proxy scorer for generated photos.
pub fn build_segmenter<S: Scalar, R: Rng + ?Sized>(
    in_channels: usize,
    width: usize,
    n_classes: usize,
    rng: &mut R,
) -> NetHandle<S> {
    let mut bld = Builder::new(rng, Init::He);
    let mut layers = Vec::new();
    let mut c = in_channels;
    for (i, d) in [1, 2, 4, 1].into_iter().enumerate() {
        layers.push(bld.conv(&format!("c{i}"), c, width, ConvGeom::dilated(3, d, Pad4::uniform(d))));
        layers.push(Layer::Relu);
        c = width;
    }
    layers.push(bld.conv("logits", width, n_classes, ConvGeom::new(1, 1, Pad4::ZERO)));
    NetHandle::from_parts(NetRole::Segmenter, None, None, 1e-5, layers, bld.params)
}
