//! Dense, row-major, owned n-dimensional arrays.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Owned row-major tensor. Images are stored channel-first, `B×C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidArgument(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// I.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                S::lit(v * std)
            })
            .collect();
        Self { shape, data }
    }

    /// I.i.d. uniform entries on `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let dist = Uniform::new(lo, hi).expect("valid uniform range");
        let data = (0..numel).map(|_| S::lit(dist.sample(rng))).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(TensorError::Rank {
                op: "dims4",
                expected: 4,
                got: self.shape.clone(),
            }),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(TensorError::Rank {
                op: "dims2",
                expected: 2,
                got: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::InvalidArgument(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_usize(self.data.len().max(1)).unwrap()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Mean absolute elementwise difference, accumulated in `f64`.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "mean_abs_diff")?;
        if self.data.is_empty() {
            return Err(TensorError::Empty("mean_abs_diff"));
        }
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
            .sum();
        Ok(total / self.data.len() as f64)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64_lossy()).unwrap_or_else(T::nan))
                .collect(),
        }
    }

    /// Items `start..end` along the leading (batch) axis.
    pub fn batch_slice(&self, start: usize, end: usize) -> Result<Self> {
        let b = *self.shape.first().ok_or(TensorError::Empty("batch_slice"))?;
        if start > end || end > b {
            return Err(TensorError::InvalidArgument(format!(
                "batch slice {start}..{end} out of 0..{b}"
            )));
        }
        let stride = self.data.len() / b.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or(TensorError::Empty("stack_batch"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut b = 0;
        for t in items {
            if t.shape.is_empty() || &t.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_batch",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            b += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = b;
        Ok(Self { shape, data })
    }

    /// Spatial crop of a `B×C×H×W` tensor.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let (b, c, ih, iw) = self.dims4()?;
        if top + h > ih || left + w > iw || h == 0 || w == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "crop {h}x{w} at ({top},{left}) outside {ih}x{iw}"
            )));
        }
        let mut data = Vec::with_capacity(b * c * h * w);
        for plane in self.data.chunks(ih * iw) {
            for r in top..top + h {
                data.extend_from_slice(&plane[r * iw + left..r * iw + left + w]);
            }
        }
        Ok(Self {
            shape: vec![b, c, h, w],
            data,
        })
    }

    /// Bilinear resampling with half-pixel centers (align_corners = false).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Self> {
        let (b, c, ih, iw) = self.dims4()?;
        if oh == 0 || ow == 0 {
            return Err(TensorError::InvalidArgument("resize to empty size".into()));
        }
        let coords = |o: usize, i: usize| -> Vec<(usize, usize, f64)> {
            let scale = i as f64 / o as f64;
            (0..o)
                .map(|d| {
                    let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                    let lo = (src.floor() as usize).min(i - 1);
                    let hi = (lo + 1).min(i - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect()
        };
        let ys = coords(oh, ih);
        let xs = coords(ow, iw);
        let mut data = Vec::with_capacity(b * c * oh * ow);
        for plane in self.data.chunks(ih * iw) {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let p = |y: usize, x: usize| plane[y * iw + x].to_f64_lossy();
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    data.push(S::lit(top * (1.0 - fy) + bot * fy));
                }
            }
        }
        Ok(Self {
            shape: vec![b, c, oh, ow],
            data,
        })
    }
}
