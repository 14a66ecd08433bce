use super::Real;
use crate::error::{Error, Result};

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all row-major.
///
/// Each output row is reduced in a fixed order, so results do not depend on
/// how callers split work.
pub fn matmul_into<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(T::zero());
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose2d<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `c[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`, without materializing `aᵀ`.
pub(crate) fn matmul_at_b_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += a · bᵀ` for `a[m×n]`, `b[k×n]`.
pub(crate) fn matmul_a_bt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    let bt = transpose2d(b, k, n);
    let mut tmp = vec![T::zero(); m * k];
    matmul_into(a, &bt, &mut tmp, m, n, k, false);
    for (cv, t) in c.iter_mut().zip(tmp) {
        *cv += t;
    }
}

/// Spatial zero padding for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// The same number of zeros on every side.
    Symmetric(usize),
    /// Output extent `ceil(in / stride)`; any odd remainder of padding goes
    /// to the bottom/right edge.
    Same,
}

/// Output extent for one spatial axis, rejecting geometries whose last
/// window would not land exactly on the padded edge.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad_before: usize,
    pad_after: usize,
) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::shape("conv2d", "kernel and stride must be >= 1"));
    }
    let padded = input + pad_before + pad_after;
    if padded < kernel {
        return Err(Error::shape(
            "conv2d",
            format!("padded extent {padded} smaller than kernel {kernel}"),
        ));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::shape(
            "conv2d",
            format!(
                "extent {input} with padding {pad_before}+{pad_after}, kernel {kernel}, \
                 stride {stride} does not divide evenly"
            ),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

fn pad_pair(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Symmetric(p) => (p, p),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            (total / 2, total - total / 2)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [batch, h, w, cin] = input_shape else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [B,H,W,C], got {input_shape:?}"),
            ));
        };
        let (pt, pb) = pad_pair(*h, kernel, stride, padding);
        let (pl, pr) = pad_pair(*w, kernel, stride, padding);
        let ho = conv_out_extent(*h, kernel, stride, pt, pb)?;
        let wo = conv_out_extent(*w, kernel, stride, pl, pr)?;
        Ok(Self {
            batch: *batch,
            h: *h,
            w: *w,
            cin: *cin,
            kernel,
            stride,
            pad_top: pt,
            pad_left: pl,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    pub fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds NHWC input into `[B·Ho·Wo, k·k·C]` patches (zero outside the image).
pub fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * plen];
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = (b * g.ho + oy) * g.wo + ox;
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some((y, x)) = g.source(oy, ky, ox, kx) {
                            let src = ((b * g.h + y) * g.w + x) * g.cin;
                            let off = (ky * g.kernel + kx) * g.cin;
                            dst[off..off + g.cin].copy_from_slice(&input[src..src + g.cin]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let plen = g.patch_len();
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = (b * g.ho + oy) * g.wo + ox;
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some((y, x)) = g.source(oy, ky, ox, kx) {
                            let dst = ((b * g.h + y) * g.w + x) * g.cin;
                            let off = (ky * g.kernel + kx) * g.cin;
                            for c in 0..g.cin {
                                out[dst + c] += src[off + c];
                            }
                        }
                    }
                }
            }
        }
    }
}
