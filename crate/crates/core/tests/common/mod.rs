//! Loop-based reference implementations and small fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use asymgan::data::{ClassMap, Dataset};
use asymgan::eval::SegMetrics;
use asymgan::infer::Translator;
use asymgan::model::{Architecture, Mode, ModelBundle};
use asymgan::nets::{NetConfig, NetHandle};
use asymgan::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_net(image_size: usize) -> NetConfig {
    NetConfig {
        image_size,
        base_channels: 4,
        n_res_blocks: 2,
        ..NetConfig::default()
    }
}

pub fn tiny_bundle(mode: Mode, image_size: usize, seed: u64) -> ModelBundle<f64> {
    ModelBundle::init(Architecture::new(mode, tiny_net(image_size)), seed).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub fn at(t: &Tensor<f64>, b: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((b * s[1] + c) * s[2] + y) * s[3] + x]
}

pub fn lsgan_d(real: &[f64], fake: &[f64]) -> f64 {
    let mut r = 0.0;
    for v in real {
        r += (v - 1.0) * (v - 1.0);
    }
    let mut f = 0.0;
    for v in fake {
        f += v * v;
    }
    r / real.len() as f64 + f / fake.len() as f64
}

pub fn lsgan_g(fake: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in fake {
        s += (v - 1.0) * (v - 1.0);
    }
    s / fake.len() as f64
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

/// `out[b][i][j] = Σ_p f[b][i][p]·f[b][j][p] / (C·H·W)`.
pub fn gram(f: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let s = f.shape();
    let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
    let norm = (c * h * w) as f64;
    let mut out = vec![vec![vec![0.0; c]; c]; nb];
    for b in 0..nb {
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += at(f, b, i, y, x) * at(f, b, j, y, x);
                    }
                }
                out[b][i][j] = acc / norm;
            }
        }
    }
    out
}

/// Squared-difference TV averaged over the `(H-1)(W-1)` anchors, summed over
/// channels, averaged over the batch.
pub fn tv_oracle(t: &Tensor<f64>, minus: bool) -> f64 {
    let s = t.shape();
    let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut total = 0.0;
    for b in 0..nb {
        for ch in 0..c {
            let mut acc = 0.0;
            for y in 0..h - 1 {
                for x in 0..w - 1 {
                    let v = at(t, b, ch, y, x);
                    let dx = at(t, b, ch, y, x + 1) - v;
                    let dy = at(t, b, ch, y + 1, x) - v;
                    acc += if minus { dx * dx - dy * dy } else { dx * dx + dy * dy };
                }
            }
            total += acc / ((h - 1) * (w - 1)) as f64;
        }
    }
    total / nb as f64
}

/// Direct-loop forward of the frozen feature stack up to tap `layer`
/// (3×3 stride-2 zero-padded convs, each followed by ReLU).
pub fn phi_features(phi: &NetHandle<f64>, image: &Tensor<f64>, layer: usize) -> Tensor<f64> {
    let p = phi.params().values();
    let mut cur = image.clone();
    for stage in 0..layer {
        let w = &p[2 * stage];
        let bias = &p[2 * stage + 1];
        let s = cur.shape().to_vec();
        let (nb, cin, h, wd) = (s[0], s[1], s[2], s[3]);
        let cout = w.shape()[0];
        let (oh, ow) = ((h + 2 - 3) / 2 + 1, (wd + 2 - 3) / 2 + 1);
        let mut out = vec![0.0; nb * cout * oh * ow];
        for b in 0..nb {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let wv = w.data()[((co * cin + ci) * 3 + ky) * 3 + kx];
                                    acc += wv * at(&cur, b, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        out[((b * cout + co) * oh + oy) * ow + ox] = acc.max(0.0);
                    }
                }
            }
        }
        cur = Tensor::new(vec![nb, cout, oh, ow], out).unwrap();
    }
    cur
}

pub fn content(phi: &NetHandle<f64>, gen: &Tensor<f64>, label: &Tensor<f64>, layer: usize) -> f64 {
    let a = phi_features(phi, gen, layer);
    let b = phi_features(phi, label, layer);
    mse(a.data(), b.data())
}

/// Squared Frobenius distance of the Gram matrices, averaged over the batch.
pub fn style(phi: &NetHandle<f64>, gen: &Tensor<f64>, photo: &Tensor<f64>, layer: usize) -> f64 {
    let ga = gram(&phi_features(phi, gen, layer));
    let gb = gram(&phi_features(phi, photo, layer));
    let mut s = 0.0;
    for b in 0..ga.len() {
        for i in 0..ga[b].len() {
            for j in 0..ga[b].len() {
                s += (ga[b][i][j] - gb[b][i][j]).powi(2);
            }
        }
    }
    s / ga.len() as f64
}

/// Loop oracle: confusion counts straight from the pixels.
pub fn seg_oracle(pred: &ClassMap, gt: &ClassMap, k: usize) -> SegMetrics {
    let mut cm = vec![vec![0u64; k]; k];
    for i in 0..gt.data.len() {
        cm[gt.data[i] as usize][pred.data[i] as usize] += 1;
    }
    let total: u64 = cm.iter().flatten().sum();
    let correct: u64 = (0..k).map(|c| cm[c][c]).sum();
    let mut recall = Vec::new();
    let mut iou = Vec::new();
    for c in 0..k {
        let row: u64 = cm[c].iter().sum();
        let col: u64 = (0..k).map(|g| cm[g][c]).sum();
        recall.push(if row > 0 { Some(cm[c][c] as f64 / row as f64) } else { None });
        let union = row + col - cm[c][c];
        iou.push(if union > 0 { Some(cm[c][c] as f64 / union as f64) } else { None });
    }
    let avg = |v: &[Option<f64>]| {
        let p: Vec<f64> = v.iter().flatten().copied().collect();
        if p.is_empty() {
            0.0
        } else {
            p.iter().sum::<f64>() / p.len() as f64
        }
    };
    SegMetrics {
        per_pixel_acc: correct as f64 / total as f64,
        per_class_acc: avg(&recall),
        class_iou: avg(&iou),
        per_class_recall: recall,
        per_class_iou: iou,
    }
}

/// Ignores the label and returns the stored photo with the same label.
pub struct RealPhotos<'a>(pub &'a Dataset<f32>);

impl Translator<f32> for RealPhotos<'_> {
    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(x.clone())
    }

    fn encode(&self, _: &Tensor<f32>) -> Result<Option<Tensor<f32>>> {
        Ok(None)
    }

    fn backward(&self, y: &Tensor<f32>, _: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let pair = self.0.val.iter().find(|p| &p.label == y).unwrap();
        Ok(pair.photo.clone())
    }

    fn sample_code(&self, _: usize, _: usize, _: usize, _: &mut dyn rand::RngCore) -> Option<Tensor<f32>> {
        None
    }
}
