use asymgan_autograd::{Graph, Scalar, Tensor, TvSign, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{cycle_l1, lsgan_d, lsgan_g, Perceptor};
use super::{LossWeights, PERCEPTION_LAYER};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelBundle};
use crate::nets::NetHandle;

/// Switches that drop extension terms entirely (not just weight them by 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub disable_adv_ext: bool,
    pub disable_perception: bool,
    pub disable_tv: bool,
}

impl Ablation {
    pub fn all() -> Self {
        Self {
            disable_adv_ext: true,
            disable_perception: true,
            disable_tv: true,
        }
    }

    pub fn any(&self) -> bool {
        self.disable_adv_ext || self.disable_perception || self.disable_tv
    }
}

/// Which objective to evaluate and how.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub formulation: Mode,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub tv_sign: TvSign,
    pub feature_layer: usize,
}

impl Objective {
    pub fn new(formulation: Mode, weights: LossWeights) -> Self {
        Self {
            formulation,
            weights,
            ablation: Ablation::default(),
            tv_sign: TvSign::Plus,
            feature_layer: PERCEPTION_LAYER,
        }
    }

    fn ext(&self) -> bool {
        self.formulation == Mode::AsymExt
    }
}

/// Values of every term plus the two weighted totals. Terms that do not
/// apply to the formulation are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_f: f64,
    pub adv_e: f64,
    pub cyc_x: f64,
    pub cyc_y: f64,
    pub cyc_z: f64,
    pub adv_ext_gf: f64,
    pub adv_ext_fe: f64,
    pub content: f64,
    pub style: f64,
    pub tv: f64,
    pub d_y: f64,
    pub d_x: f64,
    pub d_z: f64,
    pub d_ext_gf: f64,
    pub d_ext_fe: f64,
    pub total_generatorside: f64,
    pub total_discriminatorside: f64,
}

impl LossBreakdown {
    pub const TERM_NAMES: [&'static str; 18] = [
        "adv_g",
        "adv_f",
        "adv_e",
        "cyc_x",
        "cyc_y",
        "cyc_z",
        "adv_ext_gf",
        "adv_ext_fe",
        "content",
        "style",
        "tv",
        "d_y",
        "d_x",
        "d_z",
        "d_ext_gf",
        "d_ext_fe",
        "total_generatorside",
        "total_discriminatorside",
    ];

    pub fn values(&self) -> [f64; 18] {
        [
            self.adv_g,
            self.adv_f,
            self.adv_e,
            self.cyc_x,
            self.cyc_y,
            self.cyc_z,
            self.adv_ext_gf,
            self.adv_ext_fe,
            self.content,
            self.style,
            self.tv,
            self.d_y,
            self.d_x,
            self.d_z,
            self.d_ext_gf,
            self.d_ext_fe,
            self.total_generatorside,
            self.total_discriminatorside,
        ]
    }

    pub fn terms(&self) -> impl Iterator<Item = (&'static str, f64)> {
        Self::TERM_NAMES.into_iter().zip(self.values())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms().find(|(n, _)| *n == name).map(|(_, v)| v)
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    fn merge_discriminator(&mut self, d: &LossBreakdown) {
        self.d_y = d.d_y;
        self.d_x = d.d_x;
        self.d_z = d.d_z;
        self.d_ext_gf = d.d_ext_gf;
        self.d_ext_fe = d.d_ext_fe;
        self.total_discriminatorside = d.total_discriminatorside;
    }
}

/// Generated tensors handed from the generator pass to the discriminator pass.
#[derive(Clone, Debug)]
pub struct Fakes<S> {
    pub y_hat: Tensor<S>,
    pub x_hat: Tensor<S>,
    pub z_hat: Option<Tensor<S>>,
    pub z: Option<Tensor<S>>,
    /// `F(G(x), z)`, present when the extension adversarial terms are active.
    pub x_gz: Option<Tensor<S>>,
    /// `F(y, E(x))`, present when the extension adversarial terms are active.
    pub x_fe: Option<Tensor<S>>,
}

/// A built loss graph with its scalar total and the bound trainable parameters.
pub struct Pass<S> {
    graph: Graph<S>,
    total: Var,
    vars: Vec<Vec<Var>>,
    pub breakdown: LossBreakdown,
}

impl<S: Scalar> Pass<S> {
    pub fn total(&self) -> S {
        self.graph.value(self.total).item()
    }

    /// Gradients of the total, one list per network in update order.
    pub fn gradients(&self) -> Result<Vec<Vec<Option<Tensor<S>>>>> {
        let mut grads = self.graph.backward(self.total)?;
        Ok(self
            .vars
            .iter()
            .map(|net| net.iter().map(|&v| grads.take(v)).collect())
            .collect())
    }
}

fn item<S: Scalar>(g: &Graph<S>, v: Var) -> f64 {
    g.value(v).item().to_f64_lossy()
}

fn score<S: Scalar>(g: &mut Graph<S>, net: &NetHandle<S>, vars: &[Var], x: Var) -> Result<Var> {
    net.forward(g, vars, x, None)
}

fn require<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Argument(format!("objective needs {what}")))
}

/// Builds the generator-side loss. `z` is the prior sample for asymmetric
/// formulations and must be `None` for the baseline.
pub fn generator_pass<S: Scalar>(
    obj: &Objective,
    bundle: &ModelBundle<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    z: Option<&Tensor<S>>,
    trainable: bool,
) -> Result<(Pass<S>, Fakes<S>)> {
    let w = &obj.weights;
    let lit = S::lit;
    let mut g = Graph::new();
    let gv = bundle.g.bind(&mut g, trainable);
    let fv = bundle.f.bind(&mut g, trainable);
    let dxv = bundle.d_x.bind(&mut g, false);
    let dyv = bundle.d_y.bind(&mut g, false);
    let xc = g.constant(x.clone());
    let yc = g.constant(y.clone());
    let mut b = LossBreakdown::default();

    let y_hat = bundle.g.forward(&mut g, &gv, xc, None)?;
    if obj.formulation == Mode::BaselineCyclegan {
        if bundle.f.takes_code() {
            return Err(Error::Argument("baseline objective needs a code-free F".into()));
        }
        let x_rec = bundle.f.forward(&mut g, &fv, y_hat, None)?;
        let x_hat = bundle.f.forward(&mut g, &fv, yc, None)?;
        let y_rec = bundle.g.forward(&mut g, &gv, x_hat, None)?;
        let s = score(&mut g, &bundle.d_y, &dyv, y_hat)?;
        let adv_g = lsgan_g(&mut g, s)?;
        let s = score(&mut g, &bundle.d_x, &dxv, x_hat)?;
        let adv_f = lsgan_g(&mut g, s)?;
        let cyc_x = cycle_l1(&mut g, x_rec, xc)?;
        let cyc_y = cycle_l1(&mut g, y_rec, yc)?;
        let total = g.weighted_sum(&[
            (adv_g, S::one()),
            (adv_f, S::one()),
            (cyc_x, lit(w.lambda2)),
            (cyc_y, lit(w.lambda3)),
        ])?;
        b.adv_g = item(&g, adv_g);
        b.adv_f = item(&g, adv_f);
        b.cyc_x = item(&g, cyc_x);
        b.cyc_y = item(&g, cyc_y);
        b.total_generatorside = item(&g, total);
        let fakes = Fakes {
            y_hat: g.value(y_hat).clone(),
            x_hat: g.value(x_hat).clone(),
            z_hat: None,
            z: None,
            x_gz: None,
            x_fe: None,
        };
        let pass = Pass {
            total,
            vars: vec![gv, fv],
            breakdown: b,
            graph: g,
        };
        return Ok((pass, fakes));
    }

    let e = bundle.encoder()?;
    let d_z = require(&bundle.d_z, "a code discriminator")?;
    let z = z.ok_or_else(|| Error::Argument("asymmetric objective needs a prior sample".into()))?;
    let ev = e.bind(&mut g, trainable);
    let dzv = d_z.bind(&mut g, false);
    let zc = g.constant(z.clone());

    let z_hat = e.forward(&mut g, &ev, xc, None)?;
    let x_rec = bundle.f.forward(&mut g, &fv, y_hat, Some(z_hat))?;
    let x_hat = bundle.f.forward(&mut g, &fv, yc, Some(zc))?;
    let y_rec = bundle.g.forward(&mut g, &gv, x_hat, None)?;
    let z_rec = e.forward(&mut g, &ev, x_hat, None)?;

    let s = score(&mut g, &bundle.d_y, &dyv, y_hat)?;
    let adv_g = lsgan_g(&mut g, s)?;
    let s = score(&mut g, &bundle.d_x, &dxv, x_hat)?;
    let adv_f = lsgan_g(&mut g, s)?;
    let s = score(&mut g, d_z, &dzv, z_hat)?;
    let adv_e = lsgan_g(&mut g, s)?;
    let cyc_x = cycle_l1(&mut g, x_rec, xc)?;
    let cyc_y = cycle_l1(&mut g, y_rec, yc)?;
    let cyc_z = cycle_l1(&mut g, z_rec, zc)?;
    let mut terms = vec![
        (adv_g, S::one()),
        (adv_f, S::one()),
        (adv_e, lit(w.lambda1)),
        (cyc_x, lit(w.lambda2)),
        (cyc_y, lit(w.lambda3)),
        (cyc_z, lit(w.lambda4)),
    ];

    let mut x_gz_out = None;
    let mut x_fe_out = None;
    let mut ext_vals: Vec<(usize, Var)> = Vec::new();
    if obj.ext() {
        let ab = obj.ablation;
        let need_gz = !ab.disable_adv_ext || !ab.disable_tv;
        let need_fe = need_gz || !ab.disable_perception;
        let x_gz = need_gz
            .then(|| bundle.f.forward(&mut g, &fv, y_hat, Some(zc)))
            .transpose()?;
        let x_fe = need_fe
            .then(|| bundle.f.forward(&mut g, &fv, yc, Some(z_hat)))
            .transpose()?;
        if !ab.disable_adv_ext {
            let (x_gz, x_fe) = (x_gz.unwrap(), x_fe.unwrap());
            let s = score(&mut g, &bundle.d_x, &dxv, x_gz)?;
            let adv = lsgan_g(&mut g, s)?;
            terms.push((adv, lit(w.lambda5)));
            ext_vals.push((0, adv));
            let s = score(&mut g, &bundle.d_x, &dxv, x_fe)?;
            let adv = lsgan_g(&mut g, s)?;
            terms.push((adv, lit(w.lambda6)));
            ext_vals.push((1, adv));
            x_gz_out = Some(g.value(x_gz).clone());
            x_fe_out = Some(g.value(x_fe).clone());
        }
        if !ab.disable_perception {
            let x_fe = x_fe.unwrap();
            let phi = Perceptor::new(&mut g, &bundle.phi, obj.feature_layer);
            let content = phi.content(&mut g, x_fe, yc)?;
            let style = phi.style(&mut g, x_fe, xc)?;
            terms.push((content, lit(w.lambda7)));
            terms.push((style, lit(w.lambda8)));
            ext_vals.push((2, content));
            ext_vals.push((3, style));
        }
        if !ab.disable_tv {
            let images = [y_hat, x_rec, x_gz.unwrap(), x_hat, y_rec, x_fe.unwrap()];
            let mut parts = Vec::with_capacity(images.len());
            for img in images {
                parts.push((g.total_variation(img, obj.tv_sign)?, S::one()));
            }
            let tv = g.weighted_sum(&parts)?;
            terms.push((tv, lit(w.lambda9)));
            ext_vals.push((4, tv));
        }
    }
    let total = g.weighted_sum(&terms)?;

    b.adv_g = item(&g, adv_g);
    b.adv_f = item(&g, adv_f);
    b.adv_e = item(&g, adv_e);
    b.cyc_x = item(&g, cyc_x);
    b.cyc_y = item(&g, cyc_y);
    b.cyc_z = item(&g, cyc_z);
    for (slot, v) in ext_vals {
        let val = item(&g, v);
        match slot {
            0 => b.adv_ext_gf = val,
            1 => b.adv_ext_fe = val,
            2 => b.content = val,
            3 => b.style = val,
            _ => b.tv = val,
        }
    }
    b.total_generatorside = item(&g, total);
    let fakes = Fakes {
        y_hat: g.value(y_hat).clone(),
        x_hat: g.value(x_hat).clone(),
        z_hat: Some(g.value(z_hat).clone()),
        z: Some(z.clone()),
        x_gz: x_gz_out,
        x_fe: x_fe_out,
    };
    let pass = Pass {
        total,
        vars: vec![gv, fv, ev],
        breakdown: b,
        graph: g,
    };
    Ok((pass, fakes))
}

/// Builds the discriminator-side loss on already generated (and possibly
/// pool-mixed) fakes.
pub fn discriminator_pass<S: Scalar>(
    obj: &Objective,
    bundle: &ModelBundle<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    fakes: &Fakes<S>,
    trainable: bool,
) -> Result<Pass<S>> {
    let w = &obj.weights;
    let mut g = Graph::new();
    let dxv = bundle.d_x.bind(&mut g, trainable);
    let dyv = bundle.d_y.bind(&mut g, trainable);
    let xc = g.constant(x.clone());
    let yc = g.constant(y.clone());
    let mut b = LossBreakdown::default();

    let fy = g.constant(fakes.y_hat.clone());
    let ry = score(&mut g, &bundle.d_y, &dyv, yc)?;
    let sy = score(&mut g, &bundle.d_y, &dyv, fy)?;
    let d_y = lsgan_d(&mut g, ry, sy)?;
    let fx = g.constant(fakes.x_hat.clone());
    let rx = score(&mut g, &bundle.d_x, &dxv, xc)?;
    let sx = score(&mut g, &bundle.d_x, &dxv, fx)?;
    let d_x = lsgan_d(&mut g, rx, sx)?;
    let mut terms = vec![(d_y, S::one()), (d_x, S::one())];
    let mut vars = vec![dxv.clone(), dyv];

    if obj.formulation.is_asym() {
        let d_z = require(&bundle.d_z, "a code discriminator")?;
        let dzv = d_z.bind(&mut g, trainable);
        let z = g.constant(require(&fakes.z, "a prior sample")?.clone());
        let z_hat = g.constant(require(&fakes.z_hat, "an encoded code")?.clone());
        let rz = score(&mut g, d_z, &dzv, z)?;
        let sz = score(&mut g, d_z, &dzv, z_hat)?;
        let v = lsgan_d(&mut g, rz, sz)?;
        terms.push((v, S::lit(w.lambda1)));
        b.d_z = item(&g, v);
        vars.push(dzv);
    }
    if obj.ext() && !obj.ablation.disable_adv_ext {
        let gz = g.constant(require(&fakes.x_gz, "F(G(x), z)")?.clone());
        let s = score(&mut g, &bundle.d_x, &dxv, gz)?;
        let v = lsgan_d(&mut g, rx, s)?;
        terms.push((v, S::lit(w.lambda5)));
        b.d_ext_gf = item(&g, v);
        let fe = g.constant(require(&fakes.x_fe, "F(y, E(x))")?.clone());
        let s = score(&mut g, &bundle.d_x, &dxv, fe)?;
        let v = lsgan_d(&mut g, rx, s)?;
        terms.push((v, S::lit(w.lambda6)));
        b.d_ext_fe = item(&g, v);
    }
    let total = g.weighted_sum(&terms)?;
    b.d_y = item(&g, d_y);
    b.d_x = item(&g, d_x);
    b.total_discriminatorside = item(&g, total);
    Ok(Pass {
        total,
        vars,
        breakdown: b,
        graph: g,
    })
}

/// Draws the prior sample `z ~ N(0, I)` matching a batch of `x`.
pub fn sample_prior<S: Scalar, R: Rng + ?Sized>(
    bundle: &ModelBundle<S>,
    x: &Tensor<S>,
    rng: &mut R,
) -> Result<Option<Tensor<S>>> {
    let (b, _, h, w) = x.dims4()?;
    Ok(bundle
        .arch
        .zform()
        .map(|zf| Tensor::randn(zf.code_shape(b, h, w), 1.0, rng)))
}

/// Evaluates both sides of `obj` without updating anything.
pub fn evaluate<S: Scalar, R: Rng + ?Sized>(
    obj: &Objective,
    bundle: &ModelBundle<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let z = if obj.formulation.is_asym() {
        sample_prior(bundle, x, rng)?
    } else {
        None
    };
    evaluate_with_prior(obj, bundle, x, y, z.as_ref())
}

/// Like [`evaluate`] with an explicit prior sample.
pub fn evaluate_with_prior<S: Scalar>(
    obj: &Objective,
    bundle: &ModelBundle<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    z: Option<&Tensor<S>>,
) -> Result<LossBreakdown> {
    let (gp, fakes) = generator_pass(obj, bundle, x, y, z, false)?;
    let dp = discriminator_pass(obj, bundle, x, y, &fakes, false)?;
    let mut b = gp.breakdown;
    b.merge_discriminator(&dp.breakdown);
    Ok(b)
}

pub(crate) fn combine(gen: &LossBreakdown, disc: &LossBreakdown) -> LossBreakdown {
    let mut b = *gen;
    b.merge_discriminator(disc);
    b
}

/// The asymmetric objective without extension terms.
pub fn asym_objective<S: Scalar, R: Rng + ?Sized>(
    x: &Tensor<S>,
    y: &Tensor<S>,
    bundle: &ModelBundle<S>,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<LossBreakdown> {
    evaluate(&Objective::new(Mode::AsymNoExt, *weights), bundle, x, y, rng)
}

/// The asymmetric objective with the extension terms.
pub fn asym_objective_ext<S: Scalar, R: Rng + ?Sized>(
    x: &Tensor<S>,
    y: &Tensor<S>,
    bundle: &ModelBundle<S>,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<LossBreakdown> {
    evaluate(&Objective::new(Mode::AsymExt, *weights), bundle, x, y, rng)
}

/// The baseline cycle GAN objective.
pub fn cyclegan_objective<S: Scalar>(
    x: &Tensor<S>,
    y: &Tensor<S>,
    bundle: &ModelBundle<S>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    evaluate_with_prior(&Objective::new(Mode::BaselineCyclegan, *weights), bundle, x, y, None)
}
