//! im2col / col2im kernels behind the convolution ops.

use crate::scalar::Scalar;

/// Zero padding on each border of a spatial plane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Pad4 {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad4 {
    pub const ZERO: Pad4 = Pad4 {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Pads that keep the spatial size of a stride-1 convolution with an even
    /// kernel: the extra row/column goes to the bottom/right.
    pub fn same(kernel: usize) -> Self {
        let total = kernel - 1;
        let lo = total / 2;
        Self {
            top: lo,
            bottom: total - lo,
            left: lo,
            right: total - lo,
        }
    }
}

/// Geometry of a 2-D cross-correlation with square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: Pad4,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: Pad4) -> Self {
        Self {
            kernel,
            stride,
            dilation: 1,
            pad,
        }
    }

    pub fn dilated(kernel: usize, dilation: usize, pad: Pad4) -> Self {
        Self {
            kernel,
            stride: 1,
            dilation,
            pad,
        }
    }

    /// Output size along one axis, `None` when the kernel does not fit.
    pub fn out_size(&self, input: usize, pad_lo: usize, pad_hi: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + pad_lo + pad_hi;
        if padded < span || self.stride == 0 {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            self.out_size(h, self.pad.top, self.pad.bottom)?,
            self.out_size(w, self.pad.left, self.pad.right)?,
        ))
    }
}

/// Range of output positions `o` for which `o * stride + offset` lands in `0..len`.
fn valid_range(out: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(out);
    let hi = (hi as usize).min(out).max(lo);
    (lo, hi)
}

/// Unfolds one `C×H×W` plane stack into a `(C·k·k) × (oh·ow)` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [S],
) {
    let k = g.kernel;
    let p = oh * ow;
    debug_assert_eq!(cols.len(), c * k * k * p);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            let yoff = (ki * g.dilation) as isize - g.pad.top as isize;
            let (ylo, yhi) = valid_range(oh, g.stride, yoff, h);
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let xoff = (kj * g.dilation) as isize - g.pad.left as isize;
                let (xlo, xhi) = valid_range(ow, g.stride, xoff, w);
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let iy = (oy * g.stride) as isize + yoff;
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..xlo].iter_mut().for_each(|v| *v = S::zero());
                    line[xhi..].iter_mut().for_each(|v| *v = S::zero());
                    let x0 = (xlo * g.stride) as isize + xoff;
                    if g.stride == 1 {
                        let x0 = x0 as usize;
                        line[xlo..xhi].copy_from_slice(&src[x0..x0 + (xhi - xlo)]);
                    } else {
                        for (i, v) in line[xlo..xhi].iter_mut().enumerate() {
                            *v = src[x0 as usize + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto a `C×H×W` stack.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    x: &mut [S],
) {
    let k = g.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            let yoff = (ki * g.dilation) as isize - g.pad.top as isize;
            let (ylo, yhi) = valid_range(oh, g.stride, yoff, h);
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                let xoff = (kj * g.dilation) as isize - g.pad.left as isize;
                let (xlo, xhi) = valid_range(ow, g.stride, xoff, w);
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = ((oy * g.stride) as isize + yoff) as usize;
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let x0 = ((xlo * g.stride) as isize + xoff) as usize;
                    for (i, &v) in line[xlo..xhi].iter().enumerate() {
                        dst[x0 + i * g.stride] += v;
                    }
                }
            }
        }
    }
}
