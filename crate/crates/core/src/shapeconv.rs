//! Shape-aware convolution.
//!
//! A kernel `K` (`K_h x K_w x C_in x C_out`) splits into a base part
//! `K_B = m(K)`, its mean over the `n = K_h * K_w` spatial taps, and a shape
//! part `K_S = K - m(K)`. A scalar base weight `W_B` scales the base part and a
//! per-input-channel `n x n` matrix `W_S` mixes the spatial taps of the shape
//! part; their sum `K_BS` is an ordinary kernel, so the layer trains through
//! `K_BS` and runs at inference as a plain convolution with it.
//!
//! `W_S` is stored `n x n x C_in` and indexed `[source i, target o, channel]`:
//! the mixed value at target tap `o` is `sum_i W_S[i, o, c] * v[i]`. The same
//! orientation is used on the kernel side and on the patch side.
//!
//! The reweighted kernel is evaluated in the algebraically equivalent form
//!
//! ```text
//! K_BS[o] = sum_i W_S[i, o] K[i] + (W_B - s_o) m(K),   s_o = sum_i W_S[i, o]
//! ```
//!
//! which reproduces `K` bit for bit at the identity initialization
//! (`W_B = 1`, `W_S = I`), so a freshly built layer is indistinguishable from
//! a vanilla convolution. The literal decompose/product/add route is kept as
//! [`base_product_kernel`] + [`shape_product_kernel`] and agrees to rounding.

use crate::conv::{add_bias, apply_kernel, conv2d, conv2d_backward, ConvConfig};
use crate::error::{Error, Result};
use crate::im2col::{gather, Geometry};
use crate::rng::Rng;
use crate::tensor::{Axes, Scalar, Tensor};

/// Learnable state of one shape-aware layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeConvParams<T> {
    pub kernel: Tensor<T>,
    pub base_weight: T,
    pub shape_weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub cfg: ConvConfig,
}

impl<T: Scalar> ShapeConvParams<T> {
    /// Wraps an existing kernel with identity reweighting.
    pub fn from_kernel(kernel: Tensor<T>, bias: Option<Tensor<T>>, cfg: ConvConfig) -> Result<Self> {
        let params = ShapeConvParams {
            kernel,
            base_weight: T::one(),
            shape_weight: identity_shape_weight(cfg.taps(), cfg.c_in),
            bias,
            cfg,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.kernel.expect_shape(&self.cfg.kernel_shape(), "kernel")?;
        let n = self.cfg.taps();
        self.shape_weight.expect_shape(&[n, n, self.cfg.c_in], "shape weight")?;
        match (&self.bias, self.cfg.has_bias) {
            (Some(b), true) => b.expect_shape(&[self.cfg.c_out], "bias"),
            (None, false) => Ok(()),
            _ => Err(Error::Config("bias presence disagrees with config".into())),
        }
    }

    /// Parameters beyond a vanilla layer of the same geometry: `1 + n^2 C_in`.
    pub fn extra_param_count(&self) -> usize {
        1 + self.cfg.taps() * self.cfg.taps() * self.cfg.c_in
    }

    /// Arithmetic of one [`assemble_kbs`] call: the tap mixing
    /// (`2 n^2 C_in C_out`), the kernel mean and the base correction
    /// (`3 n C_in C_out`).
    pub fn assemble_flops(&self) -> u64 {
        let cfg = &self.cfg;
        let n = cfg.taps() as u64;
        let cc = (cfg.c_in * cfg.c_out) as u64;
        2 * n * n * cc + 3 * n * cc
    }
}

/// `n x n x C_in` stack of identity matrices.
pub fn identity_shape_weight<T: Scalar>(n: usize, c_in: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, n, c_in], |flat| {
        let i = flat / (n * c_in);
        let o = (flat / c_in) % n;
        if i == o {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelDecomposition<T> {
    /// `1 x 1 x C_in x C_out`
    pub base: Tensor<T>,
    /// `K_h x K_w x C_in x C_out`
    pub shape: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDecomposition<T> {
    /// `1 x 1 x C_in`
    pub base: Tensor<T>,
    /// `K_h x K_w x C_in`
    pub shape: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeConvGrads<T> {
    pub grad_kernel: Tensor<T>,
    pub grad_base_weight: T,
    pub grad_shape_weight: Tensor<T>,
    pub grad_bias: Option<Tensor<T>>,
    pub grad_input: Tensor<T>,
}

/// A fused layer: drives [`conv2d`] directly.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv<T> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub cfg: ConvConfig,
}

/// Spatial mean and residual; `trailing` is the number of values per tap.
fn split_mean<T: Scalar>(t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let base = t.reduce_mean(&Axes::new(&[0, 1])?, true)?;
    let per_tap = base.len();
    let shape = Tensor::from_fn(t.shape(), |flat| t.data()[flat] - base.data()[flat % per_tap]);
    Ok((base, shape))
}

pub fn decompose_kernel<T: Scalar>(kernel: &Tensor<T>) -> Result<KernelDecomposition<T>> {
    if kernel.rank() != 4 {
        return Err(Error::Shape(format!("kernel must be rank 4, got {:?}", kernel.shape())));
    }
    let (base, shape) = split_mean(kernel)?;
    Ok(KernelDecomposition { base, shape })
}

pub fn decompose_patch<T: Scalar>(patch: &Tensor<T>) -> Result<PatchDecomposition<T>> {
    if patch.rank() != 3 {
        return Err(Error::Shape(format!("patch must be rank 3, got {:?}", patch.shape())));
    }
    let (base, shape) = split_mean(patch)?;
    Ok(PatchDecomposition { base, shape })
}

pub fn base_product_kernel<T: Scalar>(base_weight: T, kernel_base: &Tensor<T>) -> Tensor<T> {
    kernel_base.scale(base_weight)
}

/// Mixes the `n` spatial taps of `src` (`K_h x K_w x C_in x trailing...`)
/// per input channel.
fn mix_taps<T: Scalar>(shape_weight: &Tensor<T>, src: &Tensor<T>) -> Result<Tensor<T>> {
    if src.rank() < 3 {
        return Err(Error::Shape(format!("expected K_h x K_w x C_in[...], got {:?}", src.shape())));
    }
    let n = src.shape()[0] * src.shape()[1];
    let c_in = src.shape()[2];
    shape_weight.expect_shape(&[n, n, c_in], "shape weight")?;
    let trailing: usize = src.shape()[3..].iter().product();
    let w = shape_weight.data();
    let s = src.data();
    let mut out = Tensor::zeros(src.shape());
    let od = out.data_mut();
    for o in 0..n {
        for c in 0..c_in {
            for t in 0..trailing {
                let mut acc = T::zero();
                for i in 0..n {
                    acc += w[(i * n + o) * c_in + c] * s[(i * c_in + c) * trailing + t];
                }
                od[(o * c_in + c) * trailing + t] = acc;
            }
        }
    }
    Ok(out)
}

pub fn shape_product_kernel<T: Scalar>(shape_weight: &Tensor<T>, kernel_shape: &Tensor<T>) -> Result<Tensor<T>> {
    if kernel_shape.rank() != 4 {
        return Err(Error::Shape(format!("kernel must be rank 4, got {:?}", kernel_shape.shape())));
    }
    mix_taps(shape_weight, kernel_shape)
}

pub fn shape_product_patch<T: Scalar>(shape_weight: &Tensor<T>, patch_shape: &Tensor<T>) -> Result<Tensor<T>> {
    if patch_shape.rank() != 3 {
        return Err(Error::Shape(format!("patch must be rank 3, got {:?}", patch_shape.shape())));
    }
    mix_taps(shape_weight, patch_shape)
}

/// Column sums `s[o, c] = sum_i W_S[i, o, c]`, laid out `n x C_in`.
fn column_sums<T: Scalar>(shape_weight: &Tensor<T>, n: usize, c_in: usize) -> Vec<T> {
    let w = shape_weight.data();
    let mut sums = vec![T::zero(); n * c_in];
    for i in 0..n {
        for (s, &v) in sums.iter_mut().zip(&w[i * n * c_in..(i + 1) * n * c_in]) {
            *s += v;
        }
    }
    sums
}

/// The reweighted kernel `K_BS = W_B * K_B + W_S * K_S`.
pub fn assemble_kbs<T: Scalar>(params: &ShapeConvParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let cfg = &params.cfg;
    let (n, c_in, c_out) = (cfg.taps(), cfg.c_in, cfg.c_out);
    let base = params.kernel.reduce_mean(&Axes::new(&[0, 1])?, true)?;
    let mixed = mix_taps(&params.shape_weight, &params.kernel)?;
    let sums = column_sums(&params.shape_weight, n, c_in);
    let mut kbs = mixed;
    let kd = kbs.data_mut();
    let bd = base.data();
    for o in 0..n {
        for c in 0..c_in {
            let gain = params.base_weight - sums[o * c_in + c];
            for co in 0..c_out {
                kd[(o * c_in + c) * c_out + co] += gain * bd[c * c_out + co];
            }
        }
    }
    Ok(kbs)
}

pub fn shapeconv_forward<T: Scalar>(x: &Tensor<T>, params: &ShapeConvParams<T>) -> Result<Tensor<T>> {
    let kbs = assemble_kbs(params)?;
    conv2d(x, &kbs, params.bias.as_ref(), &params.cfg)
}

/// Patch-side evaluation: every receptive field is reweighted
/// (`W_B * P_B + W_S * P_S`) and then convolved with the raw kernel.
/// Only used as a test oracle.
pub fn shapeconv_forward_patchside<T: Scalar>(x: &Tensor<T>, params: &ShapeConvParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let cfg = &params.cfg;
    let &[batch, c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("expected N x C x H x W input, got {:?}", x.shape())));
    };
    if c != cfg.c_in {
        return Err(Error::Shape(format!("input has {c} channels, config expects {}", cfg.c_in)));
    }
    let g = Geometry::new(c, h, w, cfg)?;
    let (n, rows, pixels) = (cfg.taps(), g.rows(), g.pixels());
    let sums = column_sums(&params.shape_weight, n, c);
    let wd = params.shape_weight.data();
    let inv_n = T::of(n as f64);
    let mut cols = vec![T::zero(); rows * pixels];
    let mut reweighted = vec![T::zero(); rows * pixels];
    let mut out = Tensor::zeros(&[batch, cfg.c_out, g.oh, g.ow]);
    let sample = c * h * w;
    let out_sample = cfg.c_out * pixels;
    for s in 0..batch {
        gather(&x.data()[s * sample..(s + 1) * sample], &g, &mut cols, pixels, 0);
        for p in 0..pixels {
            for ch in 0..c {
                let tap = |i: usize| cols[(i * c + ch) * pixels + p];
                let pivot = tap(0);
                let mean = pivot + (0..n).map(|i| tap(i) - pivot).fold(T::zero(), |a, v| a + v) / inv_n;
                for o in 0..n {
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc += wd[(i * n + o) * c + ch] * tap(i);
                    }
                    acc += (params.base_weight - sums[o * c + ch]) * mean;
                    reweighted[(o * c + ch) * pixels + p] = acc;
                }
            }
        }
        let dst = &mut out.data_mut()[s * out_sample..(s + 1) * out_sample];
        apply_kernel(params.kernel.data(), cfg.c_out, rows, &reweighted, pixels, dst);
        if let Some(b) = &params.bias {
            add_bias(dst, b.data(), pixels);
        }
    }
    Ok(out)
}

/// Gradients of a loss with respect to every input of [`shapeconv_forward`],
/// given the upstream gradient of its output.
pub fn shapeconv_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &ShapeConvParams<T>,
    grad_output: &Tensor<T>,
) -> Result<ShapeConvGrads<T>> {
    let kbs = assemble_kbs(params)?;
    let conv = conv2d_backward(x, &kbs, &params.cfg, grad_output)?;
    let cfg = &params.cfg;
    let (n, c_in, c_out) = (cfg.taps(), cfg.c_in, cfg.c_out);
    let KernelDecomposition { base, shape } = decompose_kernel(&params.kernel)?;
    let g = conv.grad_kernel.data();
    let (bd, sd, wd) = (base.data(), shape.data(), params.shape_weight.data());
    let sums = column_sums(&params.shape_weight, n, c_in);
    let inv_n = T::of(n as f64);

    let mut grad_base_weight = T::zero();
    for o in 0..n {
        for cc in 0..c_in * c_out {
            grad_base_weight += g[o * c_in * c_out + cc] * bd[cc];
        }
    }

    let mut grad_shape_weight = Tensor::zeros(params.shape_weight.shape());
    let gsw = grad_shape_weight.data_mut();
    for i in 0..n {
        for o in 0..n {
            for c in 0..c_in {
                let row = c * c_out;
                let mut acc = T::zero();
                for co in 0..c_out {
                    acc += g[o * c_in * c_out + row + co] * sd[i * c_in * c_out + row + co];
                }
                gsw[(i * n + o) * c_in + c] = acc;
            }
        }
    }

    // dK_BS[o]/dK[j] = W_S[j, o] + (W_B - s_o) / n; at identity init the
    // second term is exactly zero and the map is exactly the identity.
    let mut grad_kernel = Tensor::zeros(params.kernel.shape());
    let gk = grad_kernel.data_mut();
    for j in 0..n {
        for c in 0..c_in {
            for co in 0..c_out {
                let mut acc = T::zero();
                for o in 0..n {
                    let factor = wd[(j * n + o) * c_in + c] + (params.base_weight - sums[o * c_in + c]) / inv_n;
                    acc += g[(o * c_in + c) * c_out + co] * factor;
                }
                gk[(j * c_in + c) * c_out + co] = acc;
            }
        }
    }

    Ok(ShapeConvGrads {
        grad_kernel,
        grad_base_weight,
        grad_shape_weight,
        grad_bias: conv.grad_bias,
        grad_input: conv.grad_input,
    })
}

/// Folds the reweighting into a single kernel for inference. The bias passes
/// through untouched.
pub fn fuse<T: Scalar>(params: &ShapeConvParams<T>) -> Result<FusedConv<T>> {
    Ok(FusedConv { kernel: assemble_kbs(params)?, bias: params.bias.clone(), cfg: params.cfg })
}

/// He-normal kernel (`variance = 2 / (K_h K_w C_in)`), `W_B = 1`, `W_S = I`,
/// zero bias.
pub fn init_params<T: Scalar>(cfg: &ConvConfig, seed: u64) -> Result<ShapeConvParams<T>> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let kernel = he_normal_kernel(cfg, &mut rng);
    let bias = cfg.has_bias.then(|| Tensor::zeros(&[cfg.c_out]));
    ShapeConvParams::from_kernel(kernel, bias, *cfg)
}

pub(crate) fn he_normal_kernel<T: Scalar>(cfg: &ConvConfig, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / (cfg.taps() * cfg.c_in) as f64).sqrt();
    Tensor::from_fn(&cfg.kernel_shape(), |_| T::of(rng.normal() * std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d_direct;

    fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.range(-1.0, 1.0))
    }

    fn random_params(cfg: ConvConfig, rng: &mut Rng) -> ShapeConvParams<f64> {
        let n = cfg.taps();
        ShapeConvParams {
            kernel: rand_t(&cfg.kernel_shape(), rng),
            base_weight: rng.range(-2.0, 2.0),
            shape_weight: rand_t(&[n, n, cfg.c_in], rng),
            bias: cfg.has_bias.then(|| rand_t(&[cfg.c_out], rng)),
            cfg,
        }
    }

    fn hand_kernel() -> Tensor<f64> {
        Tensor::new(&[2, 2, 1, 1], vec![1.0, 2.0, 3.0, 5.0]).unwrap()
    }

    #[test]
    fn decompose_hand_kernel() {
        let d = decompose_kernel(&hand_kernel()).unwrap();
        assert_eq!(d.base.shape(), &[1, 1, 1, 1]);
        assert_eq!(d.base.data(), &[2.75]);
        assert_eq!(d.shape.data(), &[-1.75, -0.75, 0.25, 2.25]);
    }

    #[test]
    fn decompose_constant_kernel() {
        let d = decompose_kernel(&Tensor::full(&[3, 3, 2, 2], 0.5f64)).unwrap();
        assert!(d.base.data().iter().all(|&v| v == 0.5));
        assert!(d.shape.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decompose_random_kernel_residual_has_zero_mean() {
        let mut rng = Rng::new(1);
        let k = rand_t(&[3, 3, 4, 8], &mut rng);
        let d = decompose_kernel(&k).unwrap();
        for cc in 0..32 {
            let mean: f64 = (0..9).map(|p| d.shape.data()[p * 32 + cc]).sum::<f64>() / 9.0;
            assert!(mean.abs() <= 1e-12);
            let m: f64 = (0..9).map(|p| k.data()[p * 32 + cc]).sum::<f64>() / 9.0;
            assert!((m - d.base.data()[cc]).abs() <= 1e-15);
        }
        assert!(decompose_kernel(&Tensor::<f64>::zeros(&[3, 3, 2])).is_err());
    }

    #[test]
    fn decompose_patch_cases() {
        let p = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let d = decompose_patch(&p).unwrap();
        assert_eq!(d.base.data(), &[2.75]);
        assert_eq!(d.shape.data(), &[-1.75, -0.75, 0.25, 2.25]);
        let d = decompose_patch(&Tensor::full(&[3, 3, 3], 4.0f64)).unwrap();
        assert!(d.shape.data().iter().all(|&v| v == 0.0));
        let mut rng = Rng::new(2);
        let p = rand_t(&[3, 3, 5], &mut rng);
        let d = decompose_patch(&p).unwrap();
        for c in 0..5 {
            let mean: f64 = (0..9).map(|i| d.shape.data()[i * 5 + c]).sum::<f64>() / 9.0;
            assert!(mean.abs() <= 1e-12);
        }
        assert!(decompose_patch(&Tensor::<f64>::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn base_product_scales() {
        let kb = Tensor::new(&[1, 1, 1, 1], vec![0.5f64]).unwrap();
        assert_eq!(base_product_kernel(1.0, &kb), kb);
        assert_eq!(base_product_kernel(0.0, &kb).data(), &[0.0]);
        assert_eq!(base_product_kernel(2.0, &kb).data(), &[1.0]);
    }

    #[test]
    fn shape_product_identity_and_swap() {
        let mut rng = Rng::new(3);
        let ks = rand_t(&[3, 3, 2, 3], &mut rng);
        assert_eq!(shape_product_kernel(&identity_shape_weight(9, 2), &ks).unwrap(), ks);
        // n = 2 (1x2 kernel), swap matrix
        let ks = Tensor::new(&[1, 2, 1, 1], vec![-0.5, 0.5]).unwrap();
        let swap = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(shape_product_kernel(&swap, &ks).unwrap().data(), &[0.5, -0.5]);
        let ps = Tensor::new(&[1, 2, 1], vec![-0.5, 0.5]).unwrap();
        assert_eq!(shape_product_patch(&swap, &ps).unwrap().data(), &[0.5, -0.5]);
        assert!(shape_product_kernel(&swap, &Tensor::zeros(&[3, 3, 1, 1])).is_err());
    }

    #[test]
    fn shape_product_matches_loop_oracle() {
        let mut rng = Rng::new(4);
        let (n, ci, co) = (9, 2, 3);
        let w = rand_t(&[n, n, ci], &mut rng);
        let ks = rand_t(&[3, 3, ci, co], &mut rng);
        let got = shape_product_kernel(&w, &ks).unwrap();
        for o in 0..n {
            for c in 0..ci {
                for k in 0..co {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += w.data()[i * n * ci + o * ci + c] * ks.data()[i * ci * co + c * co + k];
                    }
                    assert!((got.data()[o * ci * co + c * co + k] - s).abs() <= 1e-12);
                }
            }
        }
        let ps = rand_t(&[3, 3, ci], &mut rng);
        let got = shape_product_patch(&w, &ps).unwrap();
        for o in 0..n {
            for c in 0..ci {
                let s: f64 = (0..n).map(|i| w.data()[i * n * ci + o * ci + c] * ps.data()[i * ci + c]).sum();
                assert!((got.data()[o * ci + c] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn assemble_at_init_is_exact() {
        let cfg = ConvConfig::same(3, 3, 5);
        let p: ShapeConvParams<f64> = init_params(&cfg, 17).unwrap();
        assert_eq!(p.base_weight, 1.0);
        assert_eq!(p.shape_weight, identity_shape_weight(9, 3));
        assert_eq!(assemble_kbs(&p).unwrap(), p.kernel);
        let p: ShapeConvParams<f32> = init_params(&cfg, 17).unwrap();
        assert_eq!(assemble_kbs(&p).unwrap(), p.kernel);
    }

    #[test]
    fn assemble_base_off_removes_mean() {
        let cfg = ConvConfig::new(2, 2, 1, 1).without_bias();
        let mut p = ShapeConvParams::from_kernel(hand_kernel(), None, cfg).unwrap();
        p.base_weight = 0.0;
        assert_eq!(assemble_kbs(&p).unwrap(), decompose_kernel(&hand_kernel()).unwrap().shape);
        p.base_weight = 2.0;
        assert_eq!(assemble_kbs(&p).unwrap().data(), &[3.75, 4.75, 5.75, 7.75]);
    }

    #[test]
    fn assemble_agrees_with_literal_products() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let cfg = ConvConfig::same(3, 1 + rng.below(3), 1 + rng.below(3));
            let p = random_params(cfg, &mut rng);
            let d = decompose_kernel(&p.kernel).unwrap();
            let kb = base_product_kernel(p.base_weight, &d.base);
            let ks = shape_product_kernel(&p.shape_weight, &d.shape).unwrap();
            let per_tap = kb.len();
            let literal = Tensor::from_fn(ks.shape(), |f| kb.data()[f % per_tap] + ks.data()[f]);
            assert!(assemble_kbs(&p).unwrap().max_abs_diff(&literal).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn forward_cases() {
        let mut rng = Rng::new(6);
        let cfg = ConvConfig::same(3, 2, 3);
        let x = rand_t(&[2, 2, 6, 6], &mut rng);
        let p: ShapeConvParams<f64> = init_params(&cfg, 1).unwrap();
        assert_eq!(shapeconv_forward(&x, &p).unwrap(), conv2d(&x, &p.kernel, p.bias.as_ref(), &cfg).unwrap());

        // constant input, base path off, no padding: output vanishes
        let cfg0 = ConvConfig::new(3, 3, 2, 3).without_bias();
        let mut p = init_params::<f64>(&cfg0, 2).unwrap();
        p.base_weight = 0.0;
        let xc = Tensor::full(&[1, 2, 5, 5], 3.7);
        assert!(shapeconv_forward(&xc, &p).unwrap().max_abs() <= 1e-12);

        let p = random_params(cfg, &mut rng);
        let kbs = assemble_kbs(&p).unwrap();
        let a = shapeconv_forward(&x, &p).unwrap();
        let b = conv2d_direct(&x, &kbs, p.bias.as_ref(), &cfg).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn patchside_matches_at_init_exactly() {
        let mut rng = Rng::new(7);
        let cfg = ConvConfig::same(3, 3, 2).with_stride(2);
        let p: ShapeConvParams<f64> = init_params(&cfg, 3).unwrap();
        let x = rand_t(&[2, 3, 7, 7], &mut rng);
        assert_eq!(shapeconv_forward_patchside(&x, &p).unwrap(), shapeconv_forward(&x, &p).unwrap());
    }

    #[test]
    fn patch_reweighting_agrees_with_literal_route() {
        // one patch, compare against decompose + products + add
        let mut rng = Rng::new(8);
        let cfg = ConvConfig::new(3, 3, 2, 1).without_bias();
        let mut p = random_params(cfg, &mut rng);
        p.kernel = Tensor::zeros(&cfg.kernel_shape());
        let patch = rand_t(&[3, 3, 2], &mut rng);
        let d = decompose_patch(&patch).unwrap();
        let pb = d.base.scale(p.base_weight);
        let ps = shape_product_patch(&p.shape_weight, &d.shape).unwrap();
        let pbs = Tensor::from_fn(&[3, 3, 2], |f| pb.data()[f % 2] + ps.data()[f]);
        // read the reweighted patch back through a unit kernel per tap
        let x = Tensor::from_fn(&[1, 2, 3, 3], |f| {
            let (c, rest) = (f / 9, f % 9);
            patch.data()[rest * 2 + c]
        });
        for tap in 0..18 {
            let mut probe = p.clone();
            probe.kernel.data_mut()[tap] = 1.0;
            let got = shapeconv_forward_patchside(&x, &probe).unwrap().data()[0];
            assert!((got - pbs.data()[tap]).abs() <= 1e-12, "tap {tap}");
        }
    }

    #[test]
    fn backward_zero_upstream() {
        let mut rng = Rng::new(9);
        let cfg = ConvConfig::same(3, 2, 2);
        let p = random_params(cfg, &mut rng);
        let x = rand_t(&[1, 2, 4, 4], &mut rng);
        let g = shapeconv_backward(&x, &p, &Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        assert_eq!(g.grad_base_weight, 0.0);
        assert_eq!(g.grad_kernel.max_abs(), 0.0);
        assert_eq!(g.grad_shape_weight.max_abs(), 0.0);
        assert_eq!(g.grad_input.max_abs(), 0.0);
    }

    #[test]
    fn backward_at_init_equals_vanilla() {
        let mut rng = Rng::new(10);
        let cfg = ConvConfig::same(3, 3, 4);
        let p: ShapeConvParams<f64> = init_params(&cfg, 4).unwrap();
        let x = rand_t(&[2, 3, 5, 5], &mut rng);
        let go = rand_t(&[2, 4, 5, 5], &mut rng);
        let s = shapeconv_backward(&x, &p, &go).unwrap();
        let v = conv2d_backward(&x, &p.kernel, &cfg, &go).unwrap();
        assert_eq!(s.grad_kernel, v.grad_kernel);
        assert_eq!(s.grad_input, v.grad_input);
        assert_eq!(s.grad_bias, v.grad_bias);
    }

    #[test]
    fn fuse_passes_bias_and_matches_forward() {
        let mut rng = Rng::new(11);
        let cfg = ConvConfig::same(3, 2, 3);
        let p = random_params(cfg, &mut rng);
        let f = fuse(&p).unwrap();
        assert_eq!(f.bias, p.bias);
        assert_eq!(f.kernel.shape(), p.kernel.shape());
        let x = rand_t(&[1, 2, 5, 5], &mut rng);
        assert_eq!(conv2d(&x, &f.kernel, f.bias.as_ref(), &f.cfg).unwrap(), shapeconv_forward(&x, &p).unwrap());
        let init: ShapeConvParams<f64> = init_params(&cfg, 3).unwrap();
        assert_eq!(fuse(&init).unwrap().kernel, init.kernel);
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let cfg = ConvConfig::same(3, 8, 16);
        let a: ShapeConvParams<f64> = init_params(&cfg, 5).unwrap();
        let b: ShapeConvParams<f64> = init_params(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let var = a.kernel.data().iter().map(|v| v * v).sum::<f64>() / a.kernel.len() as f64;
        let expected = 2.0 / 72.0;
        assert!((var - expected).abs() < 0.25 * expected, "var {var}");
        assert_eq!(a.bias.as_ref().unwrap().max_abs(), 0.0);
        assert_eq!(a.extra_param_count(), 1 + 81 * 8);
    }
}
