//! Segmentation scores, the proxy-segmenter protocol and diversity metrics.

use asymgan_autograd::{Adam, AdamConfig, Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{to_class_map, ClassMap, Dataset};
use crate::error::{Error, Result};
use crate::infer::{backward_sampled, Translator};
use crate::losses::{feature_extractor, PERCEPTION_LAYER};
use crate::nets::{build_segmenter, NetHandle};
use crate::rng::{mix64, stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub per_pixel_acc: f64,
    pub per_class_acc: f64,
    pub class_iou: f64,
    /// Recall per class; `None` when the class is absent from the ground truth.
    pub per_class_recall: Vec<Option<f64>>,
    /// IOU per class; `None` when the class appears in neither map.
    pub per_class_iou: Vec<Option<f64>>,
}

/// Ground truth × prediction pixel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    pub fn add(&mut self, pred: &ClassMap, gt: &ClassMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::Argument(format!(
                "class maps differ in size: {}x{} vs {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let n = self.n_classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (p, g) = (p as usize, g as usize);
            if p >= n || g >= n {
                return Err(Error::Argument(format!("class index {} out of range 0..{n}", p.max(g))));
            }
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    pub fn metrics(&self) -> SegMetrics {
        let n = self.n_classes;
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..n).map(|c| self.count(c, c)).sum();
        let mut recall = Vec::with_capacity(n);
        let mut iou = Vec::with_capacity(n);
        for c in 0..n {
            let tp = self.count(c, c);
            let gt_total: u64 = (0..n).map(|p| self.count(c, p)).sum();
            let pred_total: u64 = (0..n).map(|g| self.count(g, c)).sum();
            recall.push((gt_total > 0).then(|| tp as f64 / gt_total as f64));
            let union = gt_total + pred_total - tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        };
        SegMetrics {
            per_pixel_acc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_class_acc: mean(&recall),
            class_iou: mean(&iou),
            per_class_recall: recall,
            per_class_iou: iou,
        }
    }
}

pub fn seg_metrics(pred: &ClassMap, gt: &ClassMap, n_classes: usize) -> Result<SegMetrics> {
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.add(pred, gt)?;
    Ok(cm.metrics())
}

fn non_empty_val<S>(data: &Dataset<S>) -> Result<()> {
    if data.val.is_empty() {
        Err(Error::Argument("dataset has no validation pairs".into()))
    } else {
        Ok(())
    }
}

/// Photo → label: `G(photo)` mapped to the nearest palette colors and scored
/// against the stored class maps.
pub fn eval_photo_to_label<S: Scalar, T: Translator<S> + ?Sized>(model: &T, data: &Dataset<S>) -> Result<SegMetrics> {
    non_empty_val(data)?;
    let spec = &data.manifest.spec;
    let mut cm = ConfusionMatrix::new(spec.n_classes);
    for pair in &data.val {
        let y_hat = model.forward(&pair.photo)?;
        let pred = to_class_map(&y_hat, &spec.palette)?;
        cm.add(&pred[0], &pair.class_map)?;
    }
    Ok(cm.metrics())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            width: 16,
            epochs: 5,
            batch_size: 4,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Segmenter trained on real photos, used to score generated ones.
#[derive(Clone, Debug)]
pub struct ProxySegmenter<S> {
    pub net: NetHandle<S>,
    pub n_classes: usize,
    /// Scores on the real validation photos: the upper bound for generated ones.
    pub ceiling: SegMetrics,
}

impl<S: Scalar> ProxySegmenter<S> {
    /// Per-pixel argmax class of each image in a batch.
    pub fn segment(&self, photos: &Tensor<S>) -> Result<Vec<ClassMap>> {
        let logits = self.net.apply(photos, None)?;
        let (b, k, h, w) = logits.dims4()?;
        let plane = h * w;
        let d = logits.data();
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let mut data = Vec::with_capacity(plane);
            for p in 0..plane {
                let mut best = (S::neg_infinity(), 0u8);
                for c in 0..k {
                    let v = d[(bi * k + c) * plane + p];
                    if v > best.0 {
                        best = (v, c as u8);
                    }
                }
                data.push(best.1);
            }
            out.push(ClassMap::new(h, w, data)?);
        }
        Ok(out)
    }

    /// Scores one image per validation pair against its stored class map.
    pub fn score(&self, images: &[Tensor<S>], data: &Dataset<S>) -> Result<SegMetrics> {
        non_empty_val(data)?;
        if images.len() != data.val.len() {
            return Err(Error::Argument(format!(
                "{} images for {} validation pairs",
                images.len(),
                data.val.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(self.n_classes);
        for (img, pair) in images.iter().zip(&data.val) {
            for pred in self.segment(img)? {
                cm.add(&pred, &pair.class_map)?;
            }
        }
        Ok(cm.metrics())
    }
}

/// Trains the proxy on the training photos with their regenerated aligned
/// class maps, then records its score on the real validation photos.
pub fn train_proxy_segmenter<S: Scalar>(data: &Dataset<S>, cfg: &ProxyConfig) -> Result<ProxySegmenter<S>> {
    non_empty_val(data)?;
    let n_classes = data.manifest.spec.n_classes;
    let maps = data.train_x_class_maps();
    let mut rng = stream_rng(cfg.seed, Stream::Init);
    let mut net = build_segmenter::<S, _>(3, cfg.width, n_classes, &mut rng);
    let adam_cfg = AdamConfig {
        beta1: 0.9,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, net.params().values());
    let mut order: Vec<usize> = (0..data.train_x.len()).collect();
    let mut shuffle = stream_rng(mix64(cfg.seed), Stream::Split);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let items: Vec<Tensor<S>> = chunk.iter().map(|&i| data.train_x[i].clone()).collect();
            let x = Tensor::stack_batch(&items)?;
            let targets: Vec<usize> = chunk
                .iter()
                .flat_map(|&i| maps[i].data.iter().map(|&c| c as usize))
                .collect();
            let mut g = Graph::new();
            let params = net.bind(&mut g, true);
            let xv = g.constant(x);
            let logits = net.forward(&mut g, &params, xv, None)?;
            let loss = g.softmax_cross_entropy(logits, &targets)?;
            let mut grads = g.backward(loss)?;
            let grads: Vec<_> = params.iter().map(|&v| grads.take(v)).collect();
            adam.update(net.params_mut().values_mut(), &grads, cfg.lr)?;
        }
    }
    let mut seg = ProxySegmenter {
        net,
        n_classes,
        ceiling: ConfusionMatrix::new(n_classes).metrics(),
    };
    let photos: Vec<Tensor<S>> = data.val.iter().map(|p| p.photo.clone()).collect();
    seg.ceiling = seg.score(&photos, data)?;
    Ok(seg)
}

/// Label → photo: `F(label, z)` per validation label, segmented by the proxy.
pub fn fcn_score<S: Scalar, T: Translator<S> + ?Sized>(
    seg: &ProxySegmenter<S>,
    model: &T,
    data: &Dataset<S>,
    sample_seed: u64,
) -> Result<SegMetrics> {
    let images = data
        .val
        .iter()
        .enumerate()
        .map(|(i, p)| backward_sampled(model, &p.label, mix64(sample_seed ^ i as u64)))
        .collect::<Result<Vec<_>>>()?;
    seg.score(&images, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub n_samples: usize,
    pub mean_pixel_l1: f64,
    pub mean_feature_l2: f64,
    /// `(pixel_l1, feature_l2)` per input label.
    pub per_input: Vec<(f64, f64)>,
}

/// Mean pairwise pixel L1 and RMS feature distance over a sample set.
pub fn sample_diversity<S: Scalar>(phi: &NetHandle<S>, samples: &[Tensor<S>]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::Argument("diversity needs at least two samples".into()));
    }
    let feats = samples
        .iter()
        .map(|s| feature_extractor(phi, s, PERCEPTION_LAYER))
        .collect::<Result<Vec<_>>>()?;
    let (mut l1, mut l2, mut pairs) = (0.0, 0.0, 0usize);
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            l1 += samples[i].mean_abs_diff(&samples[j])?;
            feats[i].expect_same_shape(&feats[j], "sample_diversity")?;
            let sq: f64 = feats[i]
                .data()
                .iter()
                .zip(feats[j].data())
                .map(|(&a, &b)| (a - b).to_f64_lossy().powi(2))
                .sum();
            l2 += (sq / feats[i].numel() as f64).sqrt();
            pairs += 1;
        }
    }
    Ok((l1 / pairs as f64, l2 / pairs as f64))
}

/// Draws `n_samples` codes per label and measures how much the outputs differ.
pub fn diversity_score<S: Scalar, T: Translator<S> + ?Sized>(
    model: &T,
    phi: &NetHandle<S>,
    labels: &[Tensor<S>],
    n_samples: usize,
    seed: u64,
) -> Result<DiversityReport> {
    if n_samples < 2 {
        return Err(Error::Argument("n_samples must be at least 2".into()));
    }
    if labels.is_empty() {
        return Err(Error::Argument("no labels to sample from".into()));
    }
    let mut rng = stream_rng(seed, Stream::Sample);
    let mut per_input = Vec::with_capacity(labels.len());
    for y in labels {
        let (b, _, h, w) = y.dims4()?;
        let samples = (0..n_samples)
            .map(|_| {
                let z = model.sample_code(b, h, w, &mut rng);
                model.backward(y, z.as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        per_input.push(sample_diversity(phi, &samples)?);
    }
    let n = per_input.len() as f64;
    Ok(DiversityReport {
        n_samples,
        mean_pixel_l1: per_input.iter().map(|p| p.0).sum::<f64>() / n,
        mean_feature_l2: per_input.iter().map(|p| p.1).sum::<f64>() / n,
        per_input,
    })
}
