//! Vanilla 2-D convolution: a nested-loop reference path, the production
//! im2col + GEMM path, and exact adjoints.
//!
//! Kernels are stored `K_h x K_w x C_in x C_out`; activations are
//! `N x C x H x W`. Padding is zero padding, output extents use floor
//! division. Dilation and groups are not supported.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::im2col::{gather, scatter_add, Geometry};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub has_bias: bool,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvConfig {
    /// Stride 1, no padding, with bias.
    pub fn new(kernel_h: usize, kernel_w: usize, c_in: usize, c_out: usize) -> Self {
        ConvConfig { kernel_h, kernel_w, stride_h: 1, stride_w: 1, pad_h: 0, pad_w: 0, has_bias: true, c_in, c_out }
    }

    /// Square kernel with "same" padding for odd sizes.
    pub fn same(k: usize, c_in: usize, c_out: usize) -> Self {
        ConvConfig::new(k, k, c_in, c_out).with_padding(k / 2)
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride_h = s;
        self.stride_w = s;
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.pad_h = p;
        self.pad_w = p;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    /// Number of spatial taps, `K_h * K_w`.
    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, self.c_in, self.c_out]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Config("kernel extents must be positive".into()));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::Config("strides must be at least 1".into()));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Config("channel counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (ph, pw) = (h + 2 * self.pad_h, w + 2 * self.pad_w);
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::Config(format!(
                "{}x{} kernel larger than padded {ph}x{pw} input",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok(((ph - self.kernel_h) / self.stride_h + 1, (pw - self.kernel_w) / self.stride_w + 1))
    }

    pub fn param_count(&self) -> usize {
        self.taps() * self.c_in * self.c_out + if self.has_bias { self.c_out } else { 0 }
    }

    /// Multiply-add count times two, for one `h x w` input sample.
    pub fn flops(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok(2 * (oh * ow * self.c_out * self.taps() * self.c_in) as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_kernel: Tensor<T>,
    pub grad_bias: Option<Tensor<T>>,
}

fn check_operands<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cfg: &ConvConfig,
) -> Result<(usize, Geometry)> {
    cfg.validate()?;
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("expected N x C x H x W input, got {:?}", x.shape())));
    };
    if c != cfg.c_in {
        return Err(Error::Shape(format!("input has {c} channels, config expects {}", cfg.c_in)));
    }
    kernel.expect_shape(&cfg.kernel_shape(), "kernel")?;
    match (cfg.has_bias, bias) {
        (true, Some(b)) => b.expect_shape(&[cfg.c_out], "bias")?,
        (false, None) => {}
        (true, None) => return Err(Error::Config("config has a bias but none was given".into())),
        (false, Some(_)) => return Err(Error::Config("bias given but config has none".into())),
    }
    Ok((n, Geometry::new(c, h, w, cfg)?))
}

/// Reference convolution by direct summation.
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cfg: &ConvConfig,
) -> Result<Tensor<T>> {
    let (n, g) = check_operands(x, kernel, bias, cfg)?;
    let co_n = cfg.c_out;
    let mut out = Tensor::zeros(&[n, co_n, g.oh, g.ow]);
    let xd = x.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for s in 0..n {
        for co in 0..co_n {
            for oi in 0..g.oh {
                for oj in 0..g.ow {
                    let mut acc = T::zero();
                    for ki in 0..g.kh {
                        for kj in 0..g.kw {
                            let r = (oi * g.sh + ki) as isize - g.ph as isize;
                            let c = (oj * g.sw + kj) as isize - g.pw as isize;
                            if r < 0 || c < 0 || r as usize >= g.h || c as usize >= g.w {
                                continue;
                            }
                            for ci in 0..g.c {
                                let xv = xd[((s * g.c + ci) * g.h + r as usize) * g.w + c as usize];
                                let kv = kd[((ki * g.kw + kj) * g.c + ci) * co_n + co];
                                acc += kv * xv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[co];
                    }
                    od[((s * co_n + co) * g.oh + oi) * g.ow + oj] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// `out (C_out x P) = K^T cols` for one sample's column matrix.
pub(crate) fn apply_kernel<T: Scalar>(
    kernel: &[T],
    c_out: usize,
    rows: usize,
    cols: &[T],
    pixels: usize,
    out: &mut [T],
) {
    T::gemm(c_out, rows, pixels, kernel, (1, c_out), cols, (pixels, 1), T::zero(), out, (pixels, 1));
}

pub(crate) fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], pixels: usize) {
    for (plane, &b) in out.chunks_mut(pixels).zip(bias) {
        for v in plane {
            *v += b;
        }
    }
}

/// Production convolution, lowered through im2col and GEMM one sample at a
/// time.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cfg: &ConvConfig,
) -> Result<Tensor<T>> {
    let (n, g) = check_operands(x, kernel, bias, cfg)?;
    let (rows, pixels) = (g.rows(), g.pixels());
    let mut cols = vec![T::zero(); rows * pixels];
    let mut out = Tensor::zeros(&[n, cfg.c_out, g.oh, g.ow]);
    let sample = g.c * g.h * g.w;
    let out_sample = cfg.c_out * pixels;
    for s in 0..n {
        gather(&x.data()[s * sample..(s + 1) * sample], &g, &mut cols, pixels, 0);
        let dst = &mut out.data_mut()[s * out_sample..(s + 1) * out_sample];
        apply_kernel(kernel.data(), cfg.c_out, rows, &cols, pixels, dst);
        if let Some(b) = bias {
            add_bias(dst, b.data(), pixels);
        }
    }
    #[cfg(feature = "check-finite")]
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Exact adjoints of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    cfg: &ConvConfig,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let dummy_bias = cfg.has_bias.then(|| Tensor::zeros(&[cfg.c_out]));
    let (n, g) = check_operands(x, kernel, dummy_bias.as_ref(), cfg)?;
    grad_output.expect_shape(&[n, cfg.c_out, g.oh, g.ow], "grad_output")?;
    let (rows, pixels, c_out) = (g.rows(), g.pixels(), cfg.c_out);
    let mut cols = vec![T::zero(); rows * pixels];
    let mut grad_cols = vec![T::zero(); rows * pixels];
    let mut grad_input = Tensor::zeros(x.shape());
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    let sample = g.c * g.h * g.w;
    let out_sample = c_out * pixels;
    for s in 0..n {
        let go = &grad_output.data()[s * out_sample..(s + 1) * out_sample];
        gather(&x.data()[s * sample..(s + 1) * sample], &g, &mut cols, pixels, 0);
        // dK (rows x C_out) += cols (rows x P) . G^T (P x C_out)
        T::gemm(rows, pixels, c_out, &cols, (pixels, 1), go, (1, pixels), T::one(), grad_kernel.data_mut(), (c_out, 1));
        // dcols (rows x P) = K (rows x C_out) . G (C_out x P)
        T::gemm(
            rows,
            c_out,
            pixels,
            kernel.data(),
            (c_out, 1),
            go,
            (pixels, 1),
            T::zero(),
            &mut grad_cols,
            (pixels, 1),
        );
        scatter_add(&grad_cols, pixels, 0, &g, &mut grad_input.data_mut()[s * sample..(s + 1) * sample]);
    }
    let grad_bias = cfg.has_bias.then(|| {
        let mut gb = Tensor::zeros(&[c_out]);
        for plane in grad_output.data().chunks(pixels).enumerate() {
            gb.data_mut()[plane.0 % c_out] += plane.1.iter().copied().sum::<T>();
        }
        gb
    });
    Ok(ConvGrads { grad_input, grad_kernel, grad_bias })
}
