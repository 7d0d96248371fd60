//! Lowering of convolution to matrix products.
//!
//! Column matrices have one row per kernel tap and one column per output
//! pixel. Rows are ordered `(kh, kw, c)` with the channel fastest, which is
//! exactly the flattening of a `K_h x K_w x C_in x C_out` kernel with its
//! trailing `C_out` axis split off; the kernel therefore acts on the column
//! matrix as `K^T` (`C_out x rows`) without any copy. Columns run
//! sample-major, then output row, then output column.

use crate::conv::ConvConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Resolved geometry of one convolution over one input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn new(c: usize, h: usize, w: usize, cfg: &ConvConfig) -> Result<Self> {
        let (oh, ow) = cfg.output_hw(h, w)?;
        Ok(Geometry {
            c,
            h,
            w,
            kh: cfg.kernel_h,
            kw: cfg.kernel_w,
            sh: cfg.stride_h,
            sw: cfg.stride_w,
            ph: cfg.pad_h,
            pw: cfg.pad_w,
            oh,
            ow,
        })
    }

    pub fn rows(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// Input row for output row `o` and tap row `k`, if inside the image.
    #[inline]
    fn src_row(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.sh + k).checked_sub(self.ph).filter(|&r| r < self.h)
    }

    /// Output columns `lo..hi` whose tap column `k` lands inside the image.
    #[inline]
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        let lo = if self.pw > k { (self.pw - k).div_ceil(self.sw) } else { 0 };
        let hi = if self.w + self.pw > k { ((self.w - 1 + self.pw - k) / self.sw + 1).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Writes the columns of one sample (`c x h x w`) into `cols`, a row-major
/// matrix with leading dimension `ld`, starting at column `col0`.
pub(crate) fn gather<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T], ld: usize, col0: usize) {
    let plane = g.h * g.w;
    for ki in 0..g.kh {
        for kj in 0..g.kw {
            let (lo, hi) = g.valid_cols(kj);
            for ch in 0..g.c {
                let row = (ki * g.kw + kj) * g.c + ch;
                let dst = &mut cols[row * ld + col0..row * ld + col0 + g.pixels()];
                let src = &x[ch * plane..(ch + 1) * plane];
                for oi in 0..g.oh {
                    let out = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    let Some(r) = g.src_row(oi, ki) else {
                        out.fill(T::zero());
                        continue;
                    };
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let base = r * g.w + lo * g.sw + kj - g.pw;
                    if g.sw == 1 {
                        out[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                    } else {
                        for (t, v) in out[lo..hi].iter_mut().enumerate() {
                            *v = src[base + t * g.sw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather`]: overlap-adds columns back into one sample.
pub(crate) fn scatter_add<T: Scalar>(cols: &[T], ld: usize, col0: usize, g: &Geometry, x: &mut [T]) {
    let plane = g.h * g.w;
    for ki in 0..g.kh {
        for kj in 0..g.kw {
            let (lo, hi) = g.valid_cols(kj);
            if lo >= hi {
                continue;
            }
            for ch in 0..g.c {
                let row = (ki * g.kw + kj) * g.c + ch;
                let src = &cols[row * ld + col0..row * ld + col0 + g.pixels()];
                let dst = &mut x[ch * plane..(ch + 1) * plane];
                for oi in 0..g.oh {
                    let Some(r) = g.src_row(oi, ki) else { continue };
                    let base = r * g.w + lo * g.sw + kj - g.pw;
                    let from = &src[oi * g.ow + lo..oi * g.ow + hi];
                    if g.sw == 1 {
                        for (d, &v) in dst[base..base + hi - lo].iter_mut().zip(from) {
                            *d += v;
                        }
                    } else {
                        for (t, &v) in from.iter().enumerate() {
                            dst[base + t * g.sw] += v;
                        }
                    }
                }
            }
        }
    }
}

fn batch_dims<T: Scalar>(x: &Tensor<T>, cfg: &ConvConfig) -> Result<(usize, Geometry)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("expected N x C x H x W input, got {:?}", x.shape())));
    };
    if c != cfg.c_in {
        return Err(Error::Shape(format!("input has {c} channels, config expects {}", cfg.c_in)));
    }
    Ok((n, Geometry::new(c, h, w, cfg)?))
}

/// Lowers an `N x C x H x W` batch to a `(K_h K_w C) x (N H_out W_out)` matrix.
pub fn im2col<T: Scalar>(x: &Tensor<T>, cfg: &ConvConfig) -> Result<Tensor<T>> {
    let (n, g) = batch_dims(x, cfg)?;
    let ld = n * g.pixels();
    let mut cols = Tensor::zeros(&[g.rows(), ld]);
    let sample = g.c * g.h * g.w;
    for s in 0..n {
        gather(&x.data()[s * sample..(s + 1) * sample], &g, cols.data_mut(), ld, s * g.pixels());
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: overlap-adds a column matrix into an input-shaped
/// tensor.
pub fn col2im<T: Scalar>(cols: &Tensor<T>, input_shape: &[usize], cfg: &ConvConfig) -> Result<Tensor<T>> {
    let mut x = Tensor::zeros(input_shape);
    let (n, g) = batch_dims(&x, cfg)?;
    let ld = n * g.pixels();
    cols.expect_shape(&[g.rows(), ld], "col2im columns")?;
    let sample = g.c * g.h * g.w;
    for s in 0..n {
        scatter_add(cols.data(), ld, s * g.pixels(), &g, &mut x.data_mut()[s * sample..(s + 1) * sample]);
    }
    Ok(x)
}
