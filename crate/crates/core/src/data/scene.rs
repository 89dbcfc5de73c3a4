//! Procedural label maps and the photos rendered from them.

use std::f64::consts::TAU;

use asymgan_autograd::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use crate::error::{Error, Result};
use crate::rng::mix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub n_classes: usize,
    pub palette: Vec<[u8; 3]>,
    pub texture_octaves: usize,
    pub style_dims: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_classes: 5,
            palette: vec![
                [128, 64, 128],
                [70, 70, 70],
                [107, 142, 35],
                [70, 130, 180],
                [220, 220, 0],
            ],
            texture_octaves: 3,
            style_dims: 3,
        }
    }
}

impl SceneSpec {
    pub fn with_size(image_size: usize) -> Self {
        Self {
            image_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > 255 {
            return Err(Error::Config("n_classes must be in 2..=255".into()));
        }
        if self.palette.len() != self.n_classes {
            return Err(Error::Config(format!(
                "palette has {} colors for {} classes",
                self.palette.len(),
                self.n_classes
            )));
        }
        for (i, a) in self.palette.iter().enumerate() {
            for b in &self.palette[i + 1..] {
                let dist = a.iter().zip(b).map(|(&p, &q)| p.abs_diff(q)).max().unwrap_or(0);
                if dist < 32 {
                    return Err(Error::Config(format!(
                        "palette colors {a:?} and {b:?} are closer than 32/255"
                    )));
                }
            }
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if self.texture_octaves == 0 {
            return Err(Error::Config("texture_octaves must be positive".into()));
        }
        if self.style_dims != 3 {
            return Err(Error::Config("style vector has exactly 3 components".into()));
        }
        Ok(())
    }
}

/// Hidden appearance factor: the information a label map does not carry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub hue_shift: f64,
    pub gain: f64,
    pub phase: f64,
}

impl Style {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            hue_shift: rng.random_range(-0.05..0.05),
            gain: rng.random_range(0.7..1.3),
            phase: rng.random_range(0.0..TAU),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.hue_shift, self.gain, self.phase]
    }
}

/// Per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Argument("class map size mismatch".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Gray PNG form: every channel holds the class index.
    pub fn to_image(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().flat_map(|&c| [c; 3]).collect(),
        }
    }

    pub fn from_image(img: &RgbImage) -> Self {
        Self {
            height: img.height,
            width: img.width,
            data: img.data.chunks_exact(3).map(|p| p[0]).collect(),
        }
    }
}

/// One rendered scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub label: RgbImage,
    pub photo: RgbImage,
    pub class_map: ClassMap,
    pub style: Style,
}

impl Scene {
    pub fn label_tensor<S: Scalar>(&self) -> Tensor<S> {
        self.label.to_tensor()
    }

    pub fn photo_tensor<S: Scalar>(&self) -> Tensor<S> {
        self.photo.to_tensor()
    }
}

fn layout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed))
}

fn style_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed));
    rng.set_stream(1);
    rng
}

/// Renders the scene of `seed` with the style it draws for itself.
pub fn gen_scene(seed: u64, spec: &SceneSpec) -> Scene {
    let style = Style::sample(&mut style_rng(seed));
    render_scene(seed, spec, style)
}

/// Voronoi layout of `seed`, rendered with an explicit style.
pub fn render_scene(seed: u64, spec: &SceneSpec, style: Style) -> Scene {
    let class_map = layout(seed, spec);
    let n = spec.image_size;
    let mut label = RgbImage::new(n, n);
    let mut photo = RgbImage::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let c = class_map.get(x, y) as usize;
            label.set_pixel(x, y, spec.palette[c]);
            photo.set_pixel(x, y, shade(spec, c, x, y, &style));
        }
    }
    Scene {
        label,
        photo,
        class_map,
        style,
    }
}

fn layout(seed: u64, spec: &SceneSpec) -> ClassMap {
    let mut rng = layout_rng(seed);
    let n = spec.image_size;
    let sites: Vec<(f64, f64, u8)> = (0..rng.random_range(6..=10))
        .map(|_| {
            (
                rng.random_range(0.0..n as f64),
                rng.random_range(0.0..n as f64),
                rng.random_range(0..spec.n_classes) as u8,
            )
        })
        .collect();
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u8);
            for &(sx, sy, c) in &sites {
                let d = (px - sx).powi(2) + (py - sy).powi(2);
                if d < best.0 {
                    best = (d, c);
                }
            }
            data.push(best.1);
        }
    }
    ClassMap {
        height: n,
        width: n,
        data,
    }
}

/// Class-specific oriented multi-octave texture under a style.
fn shade(spec: &SceneSpec, class: usize, x: usize, y: usize, style: &Style) -> [u8; 3] {
    let n = spec.image_size as f64;
    let k = spec.n_classes as f64;
    let theta = class as f64 * std::f64::consts::PI / k;
    let along = (x as f64 * theta.cos() + y as f64 * theta.sin()) / n;
    let freq = 2.0 + class as f64;
    let (mut tex, mut norm) = (0.0, 0.0);
    for o in 0..spec.texture_octaves {
        let amp = 0.5f64.powi(o as i32);
        let f = freq * 2f64.powi(o as i32);
        tex += amp * (TAU * f * along + style.phase * (o + 1) as f64).sin();
        norm += amp;
    }
    tex /= norm;
    let hue = (class as f64 / k + style.hue_shift).rem_euclid(1.0);
    let sat = 0.45 + 0.15 * (class % 2) as f64;
    let light = 1.0 - 0.25 * y as f64 / n;
    let val = (0.6 * style.gain * light * (1.0 + 0.3 * tex)).clamp(0.0, 1.0);
    let [r, g, b] = hsv_to_rgb(hue, sat, val);
    [to_u8(r), to_u8(g), to_u8(b)]
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Nearest palette color per pixel (ties go to the lower class index) for
/// every image of a `B×3×H×W` batch.
pub fn to_class_map<S: Scalar>(label: &Tensor<S>, palette: &[[u8; 3]]) -> Result<Vec<ClassMap>> {
    let (b, c, h, w) = label.dims4()?;
    if c != 3 {
        return Err(Error::Argument(format!("label must have 3 channels, got {c}")));
    }
    if palette.is_empty() {
        return Err(Error::Argument("empty palette".into()));
    }
    let pal: Vec<[f64; 3]> = palette
        .iter()
        .map(|p| p.map(|v| v as f64 / 127.5 - 1.0))
        .collect();
    let plane = h * w;
    let d = label.data();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let base = bi * 3 * plane;
        let mut data = Vec::with_capacity(plane);
        for p in 0..plane {
            let px = [0, 1, 2].map(|ch| d[base + ch * plane + p].to_f64_lossy());
            let mut best = (f64::INFINITY, 0u8);
            for (k, q) in pal.iter().enumerate() {
                let dist: f64 = (0..3).map(|ch| (px[ch] - q[ch]).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, k as u8);
                }
            }
            data.push(best.1);
        }
        out.push(ClassMap {
            height: h,
            width: w,
            data,
        });
    }
    Ok(out)
}
