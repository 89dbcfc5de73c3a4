//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s together with the
//! forward value. [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar output with respect to every node that
//! transitively depends on a trainable leaf.

use crate::conv::{col2im, im2col, ConvGeom, Pad4};
use crate::error::{Result, TensorError};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sign placed between the two squared differences of the total variation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TvSign {
    /// Standard anisotropic total variation.
    #[default]
    Plus,
    /// Difference of squares; kept for comparison only, can be negative.
    Minus,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, S),
    Relu(Var),
    LeakyRelu(Var, S),
    Tanh(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ReflectPad(Var, Pad4),
    InstanceNorm {
        x: Var,
        inv_std: Vec<S>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Concat(Vec<Var>),
    UpsampleNearest(Var),
    BroadcastSpatial(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MseToConst(Var, S),
    MeanAbsDiff(Var, Var),
    MeanSqDiff(Var, Var),
    BatchSumSqDiff(Var, Var),
    Gram(Var),
    TotalVariation(Var, TvSign),
    WeightedSum(Vec<(Var, S)>),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn nonempty<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.numel() == 0 {
        Err(TensorError::Empty(op))
    } else {
        Ok(())
    }
}

fn count<S: Scalar>(n: usize) -> S {
    S::from_usize(n).expect("count representable")
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input leaf that receives a gradient when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    // ----- convolution -------------------------------------------------

    /// Cross-correlation of `B×Cin×H×W` input with `Cout×Cin×k×k` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bs, cin, h, wd) = xv.dims4()?;
        let (cout, wcin, kh, kw) = wv.dims4()?;
        if wcin != cin || kh != geom.kernel || kw != geom.kernel {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (oh, ow) = geom.out_hw(h, wd).ok_or_else(|| {
            TensorError::InvalidArgument(format!("conv2d: kernel {geom:?} does not fit {h}x{wd}"))
        })?;
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let kdim = cin * geom.kernel * geom.kernel;
        let p = oh * ow;
        let direct = is_pointwise(&geom);
        let mut cols = if direct { Vec::new() } else { vec![S::zero(); kdim * p] };
        let mut out = vec![S::zero(); bs * cout * p];
        let xd = xv.data();
        for (bi, ob) in out.chunks_mut(cout * p).enumerate() {
            let xb = &xd[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let src: &[S] = if direct {
                xb
            } else {
                im2col(xb, cin, h, wd, &geom, oh, ow, &mut cols);
                &cols
            };
            matmul(cout, kdim, p, wv.data(), false, src, false, ob, false);
            if let Some(b) = b {
                for (row, &bias) in ob.chunks_mut(p).zip(self.value(b).data()) {
                    row.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let out = Tensor::new([bs, cout, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution with `Cin×Cout×k×k` weights.
    ///
    /// `geom` is the geometry of the forward convolution this op is the
    /// adjoint of; `out_hw` selects the output size among those compatible
    /// with it (the output-padding choice).
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bs, cin, h, wd) = xv.dims4()?;
        let (wcin, cout, kh, kw) = wv.dims4()?;
        if wcin != cin || kh != geom.kernel || kw != geom.kernel {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (oh, ow) = out_hw;
        if geom.out_hw(oh, ow) != Some((h, wd)) {
            return Err(TensorError::InvalidArgument(format!(
                "conv_transpose2d: output {oh}x{ow} incompatible with input {h}x{wd} under {geom:?}"
            )));
        }
        let kdim = cout * geom.kernel * geom.kernel;
        let p = h * wd;
        let mut cols = vec![S::zero(); kdim * p];
        let mut out = vec![S::zero(); bs * cout * oh * ow];
        let xd = xv.data();
        for (bi, ob) in out.chunks_mut(cout * oh * ow).enumerate() {
            let xb = &xd[bi * cin * p..(bi + 1) * cin * p];
            matmul(kdim, cin, p, wv.data(), true, xb, false, &mut cols, false);
            col2im(&cols, cout, oh, ow, &geom, h, wd, ob);
            if let Some(b) = b {
                for (plane, &bias) in ob.chunks_mut(oh * ow).zip(self.value(b).data()) {
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let out = Tensor::new([bs, cout, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    /// Mirror padding without repeating the border pixel.
    pub fn reflect_pad(&mut self, x: Var, pad: Pad4) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4()?;
        if pad.top >= h || pad.bottom >= h || pad.left >= w || pad.right >= w {
            return Err(TensorError::InvalidArgument(format!(
                "reflect_pad {pad:?} too large for {h}x{w}"
            )));
        }
        let oh = h + pad.top + pad.bottom;
        let ow = w + pad.left + pad.right;
        let rows = reflect_index(h, pad.top, oh);
        let colsi = reflect_index(w, pad.left, ow);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in xv.data().chunks(h * w) {
            for &r in &rows {
                for &q in &colsi {
                    out.push(plane[r * w + q]);
                }
            }
        }
        let out = Tensor::new([b, c, oh, ow], out)?;
        Ok(self.push(out, Op::ReflectPad(x, pad), &[x]))
    }

    // ----- normalization and modulation -------------------------------

    /// Per-sample, per-channel normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4()?;
        let n = h * w;
        let nn = count::<S>(n);
        let mut out = Vec::with_capacity(b * c * n);
        let mut inv_std = Vec::with_capacity(b * c);
        for plane in xv.data().chunks(n) {
            let mean = plane.iter().copied().sum::<S>() / nn;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(plane.iter().map(|&v| (v - mean) * inv));
        }
        let out = Tensor::new([b, c, h, w], out)?;
        Ok(self.push(out, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// `x * gamma + beta` with per-sample, per-channel `B×C` coefficients.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4()?;
        for v in [gamma, beta] {
            if self.value(v).shape() != [b, c] {
                return Err(TensorError::ShapeMismatch {
                    op: "channel_affine",
                    lhs: vec![b, c],
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = Vec::with_capacity(xv.numel());
        for (i, plane) in xv.data().chunks(h * w).enumerate() {
            let (g, bb) = (gd[i], bd[i]);
            out.extend(plane.iter().map(|&v| v * g + bb));
        }
        let out = Tensor::new([b, c, h, w], out)?;
        Ok(self.push(out, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta]))
    }

    // ----- reshaping ---------------------------------------------------

    /// Concatenation along axis 1 (channels for images, features for vectors).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(TensorError::Empty("concat"))?);
        if first.ndim() < 2 {
            return Err(TensorError::Rank {
                op: "concat",
                expected: 2,
                got: first.shape().to_vec(),
            });
        }
        let outer = first.shape()[0];
        let tail = first.shape()[2..].to_vec();
        let inner: usize = tail.iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.ndim() || s[0] != outer || s[2..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(outer * channels * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let span = v.shape()[1] * inner;
                out.extend_from_slice(&v.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = vec![outer, channels];
        shape.extend(tail);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Nearest-neighbor resize of a `B×C×H×W` map to `oh×ow`.
    pub fn upsample_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4()?;
        let rows: Vec<usize> = (0..oh).map(|i| i * h / oh).collect();
        let cols: Vec<usize> = (0..ow).map(|j| j * w / ow).collect();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in xv.data().chunks(h * w) {
            for &r in &rows {
                for &q in &cols {
                    out.push(plane[r * w + q]);
                }
            }
        }
        let out = Tensor::new([b, c, oh, ow], out)?;
        Ok(self.push(out, Op::UpsampleNearest(x), &[x]))
    }

    /// Tiles a `B×C` vector over an `h×w` grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, c) = xv.dims2()?;
        let mut out = Vec::with_capacity(b * c * h * w);
        for &v in xv.data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let out = Tensor::new([b, c, h, w], out)?;
        Ok(self.push(out, Op::BroadcastSpatial(x), &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4()?;
        let n = count::<S>(h * w);
        let out: Vec<S> = xv
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<S>() / n)
            .collect();
        let out = Tensor::new([b, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x Wᵀ + b` with `B×In` input and `Out×In` weights.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bs, fin) = xv.dims2()?;
        let (fout, win) = wv.dims2()?;
        if win != fin {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut out = vec![S::zero(); bs * fout];
        matmul(bs, fin, fout, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [fout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![fout],
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(fout) {
                for (v, &bias) in row.iter_mut().zip(bv.data()) {
                    *v += bias;
                }
            }
        }
        let out = Tensor::new([bs, fout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    // ----- reductions to scalars ---------------------------------------

    /// `mean((x - target)²)`.
    pub fn mse_to_const(&mut self, x: Var, target: S) -> Result<Var> {
        let xv = self.value(x);
        nonempty("mse_to_const", xv)?;
        let v = xv.data().iter().map(|&a| (a - target) * (a - target)).sum::<S>()
            / count::<S>(xv.numel());
        Ok(self.push(Tensor::scalar(v), Op::MseToConst(x, target), &[x]))
    }

    /// `mean(|a - b|)`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("mean_abs_diff", av, bv)?;
        nonempty("mean_abs_diff", av)?;
        let v = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| (p - q).abs())
            .sum::<S>()
            / count::<S>(av.numel());
        Ok(self.push(Tensor::scalar(v), Op::MeanAbsDiff(a, b), &[a, b]))
    }

    /// `mean((a - b)²)`.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("mean_sq_diff", av, bv)?;
        nonempty("mean_sq_diff", av)?;
        let v = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum::<S>()
            / count::<S>(av.numel());
        Ok(self.push(Tensor::scalar(v), Op::MeanSqDiff(a, b), &[a, b]))
    }

    /// `Σ (a - b)²` divided by the leading (batch) dimension.
    pub fn batch_sum_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("batch_sum_sq_diff", av, bv)?;
        nonempty("batch_sum_sq_diff", av)?;
        let batch = av.shape().first().copied().unwrap_or(1).max(1);
        let v = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum::<S>()
            / count::<S>(batch);
        Ok(self.push(Tensor::scalar(v), Op::BatchSumSqDiff(a, b), &[a, b]))
    }

    /// Per-sample Gram matrices `B×C×C`, normalized by `C·H·W`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4()?;
        let n = h * w;
        let norm = S::one() / count::<S>(c * n);
        let mut out = vec![S::zero(); b * c * c];
        for (xb, gb) in xv.data().chunks(c * n).zip(out.chunks_mut(c * c)) {
            matmul(c, n, c, xb, false, xb, true, gb, false);
            gb.iter_mut().for_each(|v| *v *= norm);
        }
        let out = Tensor::new([b, c, c], out)?;
        Ok(self.push(out, Op::Gram(x), &[x]))
    }

    /// Squared-difference total variation, averaged over the `(H-1)(W-1)`
    /// anchor positions, summed over channels, averaged over the batch.
    pub fn total_variation(&mut self, x: Var, sign: TvSign) -> Result<Var> {
        let xv = self.value(x);
        let (b, _c, h, w) = xv.dims4()?;
        if h < 2 || w < 2 {
            return Err(TensorError::InvalidArgument(format!(
                "total_variation needs H, W >= 2, got {h}x{w}"
            )));
        }
        let s = match sign {
            TvSign::Plus => S::one(),
            TvSign::Minus => -S::one(),
        };
        let norm = count::<S>((h - 1) * (w - 1) * b);
        let mut acc = S::zero();
        for plane in xv.data().chunks(h * w) {
            let mut ps = S::zero();
            for r in 0..h - 1 {
                for q in 0..w - 1 {
                    let v = plane[r * w + q];
                    let dh = plane[r * w + q + 1] - v;
                    let dv = plane[(r + 1) * w + q] - v;
                    ps += dh * dh + s * dv * dv;
                }
            }
            acc += ps;
        }
        Ok(self.push(
            Tensor::scalar(acc / norm),
            Op::TotalVariation(x, sign),
            &[x],
        ))
    }

    /// `Σ wᵢ · termᵢ`, accumulated left to right starting from zero.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Result<Var> {
        let mut acc = S::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(TensorError::InvalidArgument(format!(
                    "weighted_sum term of shape {:?} is not a scalar",
                    t.shape()
                )));
            }
            acc += w * t.item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), &inputs))
    }

    /// Mean per-pixel softmax cross-entropy of `B×K×H×W` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k, h, w) = lv.dims4()?;
        let n = h * w;
        if targets.len() != b * n || targets.iter().any(|&t| t >= k) {
            return Err(TensorError::InvalidArgument(
                "softmax_cross_entropy: targets do not match logits".into(),
            ));
        }
        let d = lv.data();
        let mut probs = vec![S::zero(); d.len()];
        let mut loss = S::zero();
        for bi in 0..b {
            let base = bi * k * n;
            for p in 0..n {
                let mut mx = S::neg_infinity();
                for ki in 0..k {
                    mx = mx.max(d[base + ki * n + p]);
                }
                let mut z = S::zero();
                for ki in 0..k {
                    let e = (d[base + ki * n + p] - mx).exp();
                    probs[base + ki * n + p] = e;
                    z += e;
                }
                for ki in 0..k {
                    probs[base + ki * n + p] /= z;
                }
                let t = targets[bi * n + p];
                loss -= (d[base + t * n + p] - mx) - z.ln();
            }
        }
        let v = loss / count::<S>(b * n);
        Ok(self.push(
            Tensor::scalar(v),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ----- backward ----------------------------------------------------

    /// Reverse pass from a one-element `output`.
    ///
    /// Intermediate gradients are released as soon as they have been
    /// propagated, so only leaf gradients remain in the result.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward from non-scalar of shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::full(out.shape().to_vec(), S::one()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s))?;
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, |xv, gv| if xv > S::zero() { gv } else { S::zero() })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let gx = self
                    .value(*x)
                    .zip_map(g, |xv, gv| if xv > S::zero() { gv } else { gv * slope })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Tanh(x) => {
                let gx = y.zip_map(g, |yv, gv| gv * (S::one() - yv * yv))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, g, grads)?,
            Op::ConvTranspose2d { x, w, b, geom } => {
                self.conv_transpose2d_backward(*x, *w, *b, geom, g, grads)?
            }
            Op::ReflectPad(x, pad) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = y.dims4()?;
                let rows = reflect_index(h, pad.top, oh);
                let cols = reflect_index(w, pad.left, ow);
                let mut gx = vec![S::zero(); b * c * h * w];
                for (gp, dst) in g.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                    for (oy, &r) in rows.iter().enumerate() {
                        for (ox, &q) in cols.iter().enumerate() {
                            dst[r * w + q] += gp[oy * ow + ox];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([b, c, h, w], gx)?)?;
            }
            Op::InstanceNorm { x, inv_std } => {
                let (b, c, h, w) = y.dims4()?;
                let n = h * w;
                let nn = count::<S>(n);
                let mut gx = Vec::with_capacity(b * c * n);
                for ((yp, gp), &inv) in y.data().chunks(n).zip(g.data().chunks(n)).zip(inv_std) {
                    let sg: S = gp.iter().copied().sum();
                    let sgy: S = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum();
                    let k = inv / nn;
                    gx.extend(
                        gp.iter()
                            .zip(yp)
                            .map(|(&gv, &yv)| k * (nn * gv - sg - yv * sgy)),
                    );
                }
                self.accumulate(grads, *x, Tensor::new([b, c, h, w], gx)?)?;
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let xv = self.value(*x);
                let (b, c, h, w) = xv.dims4()?;
                let n = h * w;
                let gd = self.value(*gamma).data();
                let mut gx = Vec::with_capacity(xv.numel());
                let mut gg = Vec::with_capacity(b * c);
                let mut gb = Vec::with_capacity(b * c);
                for (idx, (xp, gp)) in xv.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let gam = gd[idx];
                    gx.extend(gp.iter().map(|&v| v * gam));
                    gg.push(gp.iter().zip(xp).map(|(&a, &b)| a * b).sum());
                    gb.push(gp.iter().copied().sum());
                }
                self.accumulate(grads, *x, Tensor::new([b, c, h, w], gx)?)?;
                self.accumulate(grads, *gamma, Tensor::new([b, c], gg)?)?;
                self.accumulate(grads, *beta, Tensor::new([b, c], gb)?)?;
            }
            Op::Concat(parts) => {
                let outer = y.shape()[0];
                let total = y.numel() / outer;
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let span = pv.numel() / outer;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(pv.numel());
                        for o in 0..outer {
                            let start = o * total + offset;
                            gp.extend_from_slice(&g.data()[start..start + span]);
                        }
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), gp)?)?;
                    }
                    offset += span;
                }
            }
            Op::UpsampleNearest(x) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = y.dims4()?;
                let mut gx = vec![S::zero(); b * c * h * w];
                for (gp, dst) in g.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                    for oy in 0..oh {
                        let r = oy * h / oh;
                        for ox in 0..ow {
                            dst[r * w + ox * w / ow] += gp[oy * ow + ox];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([b, c, h, w], gx)?)?;
            }
            Op::BroadcastSpatial(x) => {
                let (_, _, h, w) = y.dims4()?;
                let gx: Vec<S> = g.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), gx)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4()?;
                let n = count::<S>(h * w);
                let mut gx = Vec::with_capacity(xv.numel());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv / n, h * w));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bs, fin) = xv.dims2()?;
                let (fout, _) = wv.dims2()?;
                if self.wants(*x) {
                    let mut gx = vec![S::zero(); bs * fin];
                    matmul(bs, fout, fin, g.data(), false, wv.data(), false, &mut gx, false);
                    self.accumulate(grads, *x, Tensor::new([bs, fin], gx)?)?;
                }
                if self.wants(*w) {
                    let mut gw = vec![S::zero(); fout * fin];
                    matmul(fout, bs, fin, g.data(), true, xv.data(), false, &mut gw, false);
                    self.accumulate(grads, *w, Tensor::new([fout, fin], gw)?)?;
                }
                if let Some(b) = b {
                    let mut gb = vec![S::zero(); fout];
                    for row in g.data().chunks(fout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new([fout], gb)?)?;
                }
            }
            Op::MseToConst(x, target) => {
                let xv = self.value(*x);
                let k = g.item() * S::lit(2.0) / count::<S>(xv.numel());
                let t = *target;
                self.accumulate(grads, *x, xv.map(|v| (v - t) * k))?;
            }
            Op::MeanAbsDiff(a, b) => {
                let av = self.value(*a);
                let k = g.item() / count::<S>(av.numel());
                let ga = av.zip_map(self.value(*b), |p, q| {
                    let d = p - q;
                    if d > S::zero() {
                        k
                    } else if d < S::zero() {
                        -k
                    } else {
                        S::zero()
                    }
                })?;
                if self.wants(*b) {
                    self.accumulate(grads, *b, ga.map(|v| -v))?;
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::MeanSqDiff(a, b) | Op::BatchSumSqDiff(a, b) => {
                let av = self.value(*a);
                let denom = match node.op {
                    Op::MeanSqDiff(..) => av.numel(),
                    _ => av.shape().first().copied().unwrap_or(1).max(1),
                };
                let k = g.item() * S::lit(2.0) / count::<S>(denom);
                let ga = av.zip_map(self.value(*b), |p, q| (p - q) * k)?;
                if self.wants(*b) {
                    self.accumulate(grads, *b, ga.map(|v| -v))?;
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Gram(x) => {
                let xv = self.value(*x);
                let (b, c, h, w) = xv.dims4()?;
                let n = h * w;
                let norm = S::one() / count::<S>(c * n);
                let mut gx = vec![S::zero(); xv.numel()];
                let mut sym = vec![S::zero(); c * c];
                for ((xb, gb), dst) in xv
                    .data()
                    .chunks(c * n)
                    .zip(g.data().chunks(c * c))
                    .zip(gx.chunks_mut(c * n))
                {
                    for r in 0..c {
                        for q in 0..c {
                            sym[r * c + q] = (gb[r * c + q] + gb[q * c + r]) * norm;
                        }
                    }
                    matmul(c, c, n, &sym, false, xb, false, dst, false);
                }
                self.accumulate(grads, *x, Tensor::new([b, c, h, w], gx)?)?;
            }
            Op::TotalVariation(x, sign) => {
                let xv = self.value(*x);
                let (b, _c, h, w) = xv.dims4()?;
                let s = match sign {
                    TvSign::Plus => S::one(),
                    TvSign::Minus => -S::one(),
                };
                let k = g.item() * S::lit(2.0) / count::<S>((h - 1) * (w - 1) * b);
                let mut gx = vec![S::zero(); xv.numel()];
                for (plane, dst) in xv.data().chunks(h * w).zip(gx.chunks_mut(h * w)) {
                    for r in 0..h - 1 {
                        for q in 0..w - 1 {
                            let i = r * w + q;
                            let dh = (plane[i + 1] - plane[i]) * k;
                            let dv = (plane[i + w] - plane[i]) * k * s;
                            dst[i + 1] += dh;
                            dst[i] -= dh + dv;
                            dst[i + w] += dv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::WeightedSum(terms) => {
                let gv = g.item();
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(gv * w))?;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let (b, k, h, w) = lv.dims4()?;
                let n = h * w;
                let scale = g.item() / count::<S>(b * n);
                let mut gl: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for bi in 0..b {
                    for p in 0..n {
                        let t = targets[bi * n + p];
                        gl[bi * k * n + t * n + p] -= scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new([b, k, h, w], gl)?)?;
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bs, cin, h, wd) = xv.dims4()?;
        let (cout, _, _, _) = wv.dims4()?;
        let (_, _, oh, ow) = g.dims4()?;
        let kdim = cin * geom.kernel * geom.kernel;
        let p = oh * ow;
        let direct = is_pointwise(geom);
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        let mut cols = vec![S::zero(); kdim * p];
        let mut gw = vec![S::zero(); cout * kdim];
        let mut gx = if want_x { vec![S::zero(); xv.numel()] } else { Vec::new() };
        for bi in 0..bs {
            let gb = &g.data()[bi * cout * p..(bi + 1) * cout * p];
            let xb = &xv.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            if want_w {
                let src: &[S] = if direct {
                    xb
                } else {
                    im2col(xb, cin, h, wd, geom, oh, ow, &mut cols);
                    &cols
                };
                matmul(cout, p, kdim, gb, false, src, true, &mut gw, true);
            }
            if want_x {
                let dst = &mut gx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if direct {
                    matmul(kdim, cout, p, wv.data(), true, gb, false, dst, false);
                } else {
                    matmul(kdim, cout, p, wv.data(), true, gb, false, &mut cols, false);
                    col2im(&cols, cin, h, wd, geom, oh, ow, dst);
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), gx)?)?;
        }
        if want_w {
            self.accumulate(grads, w, Tensor::new(wv.shape().to_vec(), gw)?)?;
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(g.data(), cout, p))?;
        }
        Ok(())
    }

    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bs, cin, h, wd) = xv.dims4()?;
        let (_, cout, _, _) = wv.dims4()?;
        let (_, _, oh, ow) = g.dims4()?;
        let kdim = cout * geom.kernel * geom.kernel;
        let p = h * wd;
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        let mut cols = vec![S::zero(); kdim * p];
        let mut gw = vec![S::zero(); cin * kdim];
        let mut gx = if want_x { vec![S::zero(); xv.numel()] } else { Vec::new() };
        for bi in 0..bs {
            let gb = &g.data()[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            im2col(gb, cout, oh, ow, geom, h, wd, &mut cols);
            if want_x {
                let dst = &mut gx[bi * cin * p..(bi + 1) * cin * p];
                matmul(cin, kdim, p, wv.data(), false, &cols, false, dst, false);
            }
            if want_w {
                let xb = &xv.data()[bi * cin * p..(bi + 1) * cin * p];
                matmul(cin, p, kdim, xb, false, &cols, true, &mut gw, true);
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), gx)?)?;
        }
        if want_w {
            self.accumulate(grads, w, Tensor::new(wv.shape().to_vec(), gw)?)?;
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(g.data(), cout, oh * ow))?;
        }
        Ok(())
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == Pad4::ZERO
}

fn channel_sums<S: Scalar>(g: &[S], channels: usize, plane: usize) -> Tensor<S> {
    let mut out = vec![S::zero(); channels];
    for (i, p) in g.chunks(plane).enumerate() {
        out[i % channels] += p.iter().copied().sum::<S>();
    }
    Tensor::new([channels], out).expect("bias gradient shape")
}

fn reflect_index(len: usize, pad_lo: usize, out: usize) -> Vec<usize> {
    (0..out)
        .map(|o| {
            let i = o as isize - pad_lo as isize;
            let n = len as isize;
            let r = if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            };
            r as usize
        })
        .collect()
}
