//! Inference configurations, code interpolation and sensitivity probes.

use std::path::{Path, PathBuf};

use asymgan_autograd::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::save_grid;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::rng::{stream_rng, Stream};

/// The three mappings a probe needs. Implemented by [`ModelBundle`] and by
/// stubs in tests.
pub trait Translator<S: Scalar> {
    /// `G(x)`.
    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>>;
    /// `E(x)`, or `None` for models without an encoder.
    fn encode(&self, x: &Tensor<S>) -> Result<Option<Tensor<S>>>;
    /// `F(y, code)`.
    fn backward(&self, y: &Tensor<S>, code: Option<&Tensor<S>>) -> Result<Tensor<S>>;
    /// A prior sample shaped for a batch of `h × w` images.
    fn sample_code(&self, batch: usize, h: usize, w: usize, rng: &mut dyn rand::RngCore) -> Option<Tensor<S>>;
}

impl<S: Scalar> Translator<S> for ModelBundle<S> {
    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.g.apply(x, None)
    }

    fn encode(&self, x: &Tensor<S>) -> Result<Option<Tensor<S>>> {
        self.e.as_ref().map(|e| e.apply(x, None)).transpose()
    }

    fn backward(&self, y: &Tensor<S>, code: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        self.f.apply(y, code)
    }

    fn sample_code(&self, batch: usize, h: usize, w: usize, rng: &mut dyn rand::RngCore) -> Option<Tensor<S>> {
        self.arch
            .zform()
            .map(|zf| Tensor::randn(zf.code_shape(batch, h, w), 1.0, rng))
    }
}

/// `G = F = identity`, no code.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTranslator;

impl<S: Scalar> Translator<S> for IdentityTranslator {
    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(x.clone())
    }

    fn encode(&self, _x: &Tensor<S>) -> Result<Option<Tensor<S>>> {
        Ok(None)
    }

    fn backward(&self, y: &Tensor<S>, _code: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        Ok(y.clone())
    }

    fn sample_code(&self, _: usize, _: usize, _: usize, _: &mut dyn rand::RngCore) -> Option<Tensor<S>> {
        None
    }
}

/// `ŷ = G(x)`.
pub fn forward_translate<S: Scalar, T: Translator<S> + ?Sized>(model: &T, x: &Tensor<S>) -> Result<Tensor<S>> {
    model.forward(x)
}

/// `x̂ = F(y, z)` with `z ~ N(0, I)` drawn from `sample_seed`.
pub fn backward_sampled<S: Scalar, T: Translator<S> + ?Sized>(
    model: &T,
    y: &Tensor<S>,
    sample_seed: u64,
) -> Result<Tensor<S>> {
    let (b, _, h, w) = y.dims4()?;
    let z = model.sample_code(b, h, w, &mut stream_rng(sample_seed, Stream::Sample));
    model.backward(y, z.as_ref())
}

/// `x̂ = F(y, E(x_ref))`.
pub fn backward_encoded<S: Scalar, T: Translator<S> + ?Sized>(
    model: &T,
    y: &Tensor<S>,
    x_ref: &Tensor<S>,
) -> Result<Tensor<S>> {
    let z = model.encode(x_ref)?;
    model.backward(y, z.as_ref())
}

/// `n` codes evenly spaced from `start` to `end`; both endpoints are exact.
pub fn interpolate_codes<S: Scalar>(start: &Tensor<S>, end: &Tensor<S>, n: usize) -> Result<Vec<Tensor<S>>> {
    if n < 2 {
        return Err(Error::Argument(format!("interpolation needs n >= 2, got {n}")));
    }
    start.expect_same_shape(end, "interpolate_codes")?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i == 0 {
            out.push(start.clone());
        } else if i == n - 1 {
            out.push(end.clone());
        } else {
            let t = S::lit(i as f64 / (n - 1) as f64);
            out.push(start.zip_map(end, |a, b| a + t * (b - a))?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Random `crop_size` window.
    Crop,
    /// Bilinear resize to `scale_size`.
    Scale,
    /// Additive uniform noise in `(-a, a)`.
    Disturb,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub crop_size: usize,
    pub scale_size: usize,
    pub epsilon_amplitude: f64,
    pub noise_seed: u64,
}

impl ProbeSpec {
    pub fn new(kind: ProbeKind) -> Self {
        Self {
            kind,
            crop_size: 125,
            scale_size: 130,
            epsilon_amplitude: 0.01,
            noise_seed: 0,
        }
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        match self.kind {
            ProbeKind::Crop if self.crop_size == 0 || self.crop_size >= h.min(w) => Err(Error::Argument(
                format!("crop size {} must be below image size {h}x{w}", self.crop_size),
            )),
            ProbeKind::Scale if self.scale_size == 0 => Err(Error::Argument("scale size must be positive".into())),
            ProbeKind::Disturb if !(self.epsilon_amplitude > 0.0) => {
                Err(Error::Argument("epsilon amplitude must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Reconstruction errors of one image with and without the probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub clean: f64,
    pub probed: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub clean_mean: f64,
    pub clean_std: f64,
    pub probed_mean: f64,
    pub probed_std: f64,
    /// Mean of `probed − clean`.
    pub degradation_mean: f64,
}

impl ProbeStats {
    fn from_entries(entries: &[ProbeEntry]) -> Self {
        if entries.is_empty() {
            return Self::default();
        }
        let n = entries.len() as f64;
        let mean = |f: &dyn Fn(&ProbeEntry) -> f64| entries.iter().map(f).sum::<f64>() / n;
        let clean_mean = mean(&|e| e.clean);
        let probed_mean = mean(&|e| e.probed);
        Self {
            clean_mean,
            clean_std: mean(&|e| (e.clean - clean_mean).powi(2)).sqrt(),
            probed_mean,
            probed_std: mean(&|e| (e.probed - probed_mean).powi(2)).sqrt(),
            degradation_mean: mean(&|e| e.probed - e.clean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub spec: ProbeSpec,
    /// `x → G → probe → F` against (aligned) `x`.
    pub forward: Vec<ProbeEntry>,
    /// `y → F → probe → G` against (aligned) `y`.
    pub backward: Vec<ProbeEntry>,
    pub forward_stats: ProbeStats,
    pub backward_stats: ProbeStats,
    pub output_images: Vec<PathBuf>,
}

/// Applies the probe to `img` and returns it with the matching transform
/// of `target`.
fn apply_probe<S: Scalar, R: Rng + ?Sized>(
    spec: &ProbeSpec,
    img: &Tensor<S>,
    target: &Tensor<S>,
    rng: &mut R,
) -> Result<(Tensor<S>, Tensor<S>, Option<(usize, usize)>)> {
    let (_, _, h, w) = img.dims4()?;
    spec.validate(h, w)?;
    Ok(match spec.kind {
        ProbeKind::Crop => {
            let c = spec.crop_size;
            let top = rng.random_range(0..=h - c);
            let left = rng.random_range(0..=w - c);
            (img.crop(top, left, c, c)?, target.crop(top, left, c, c)?, Some((top, left)))
        }
        ProbeKind::Scale => {
            let s = spec.scale_size;
            (img.resize_bilinear(s, s)?, target.resize_bilinear(s, s)?, None)
        }
        ProbeKind::Disturb => {
            let a = spec.epsilon_amplitude;
            let eps = Tensor::<S>::rand_uniform(img.shape().to_vec(), -a, a, rng);
            (img.zip_map(&eps, |v, e| v + e)?, target.clone(), None)
        }
    })
}

/// Clean reconstruction error, restricted to the crop window when one applies.
fn clean_error<S: Scalar>(
    spec: &ProbeSpec,
    recon: &Tensor<S>,
    target: &Tensor<S>,
    window: Option<(usize, usize)>,
) -> Result<f64> {
    Ok(match window {
        Some((top, left)) => {
            let c = spec.crop_size;
            recon.crop(top, left, c, c)?.mean_abs_diff(&target.crop(top, left, c, c)?)?
        }
        None => recon.mean_abs_diff(target)?,
    })
}

/// Measures how reconstructions degrade when the intermediate translation is
/// cropped, rescaled or slightly disturbed. With `out_dir`, writes two image
/// strips per input: input, translation and reconstruction, then the
/// aligned target, probed translation and its reconstruction.
pub fn sensitivity_probe<S: Scalar, T: Translator<S> + ?Sized>(
    model: &T,
    x_set: &[Tensor<S>],
    y_set: &[Tensor<S>],
    spec: &ProbeSpec,
    out_dir: Option<&Path>,
) -> Result<ProbeReport> {
    let mut rng = stream_rng(spec.noise_seed, Stream::Probe);
    let mut forward = Vec::new();
    let mut backward = Vec::new();
    let mut output_images = Vec::new();
    let mut emit = |name: String, same: Vec<Tensor<S>>, probed: Vec<Tensor<S>>| -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("{name}.png"));
            save_grid(&path, &[same])?;
            let path_p = dir.join(format!("{name}_probed.png"));
            save_grid(&path_p, &[probed])?;
            output_images.push(path);
            output_images.push(path_p);
        }
        Ok(())
    };
    for (i, x) in x_set.iter().enumerate() {
        let y_hat = model.forward(x)?;
        let code = model.encode(x)?;
        let recon = model.backward(&y_hat, code.as_ref())?;
        let (probed, target, window) = apply_probe(spec, &y_hat, x, &mut rng)?;
        let recon_p = model.backward(&probed, code.as_ref())?;
        forward.push(ProbeEntry {
            clean: clean_error(spec, &recon, x, window)?,
            probed: recon_p.mean_abs_diff(&target)?,
        });
        emit(format!("forward_{i:04}"), vec![x.clone(), y_hat, recon], vec![target, probed, recon_p])?;
    }
    for (i, y) in y_set.iter().enumerate() {
        let (b, _, h, w) = y.dims4()?;
        let z = model.sample_code(b, h, w, &mut rng);
        let x_hat = model.backward(y, z.as_ref())?;
        let recon = model.forward(&x_hat)?;
        let (probed, target, window) = apply_probe(spec, &x_hat, y, &mut rng)?;
        let recon_p = model.forward(&probed)?;
        backward.push(ProbeEntry {
            clean: clean_error(spec, &recon, y, window)?,
            probed: recon_p.mean_abs_diff(&target)?,
        });
        emit(format!("backward_{i:04}"), vec![y.clone(), x_hat, recon], vec![target, probed, recon_p])?;
    }
    Ok(ProbeReport {
        spec: *spec,
        forward_stats: ProbeStats::from_entries(&forward),
        backward_stats: ProbeStats::from_entries(&backward),
        forward,
        backward,
        output_images,
    })
}
