//! The property suite behind the `selftest` command: randomized equivalence
//! checks of the layer, fusion, metric oracles, gradient checks and a short
//! reproducibility run.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use crate::conv::{conv2d, conv2d_direct, ConvConfig};
use crate::data::{generate_dataset, DatasetConfig};
use crate::error::Result;
use crate::gradcheck::{random_shapeconv_params, run_gradcheck, GradCheckConfig};
use crate::metrics::{fcn_metrics, trimap_curve, ConfusionMatrix};
use crate::net::{build_model, LayerKind, Model, ModelSpec};
use crate::rng::Rng;
use crate::shapeconv::{
    decompose_patch, fuse, identity_shape_weight, init_params, shapeconv_forward, shapeconv_forward_patchside,
    ShapeConvParams,
};
use crate::tensor::{Scalar, Tensor};
use crate::train::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome { name: name.to_string(), passed, detail }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let verdict = if c.passed { "pass" } else { "FAIL" };
            writeln!(s, "{verdict}  {:<26} {}", c.name, c.detail).expect("write to String");
        }
        s
    }
}

/// A random layer geometry and a matching input size. `pad` can be forced
/// to zero for properties that only hold away from padded borders.
pub fn random_layer(rng: &mut Rng, allow_pad: bool) -> (ConvConfig, [usize; 4]) {
    let kh = 1 + rng.below(3);
    let kw = 1 + rng.below(3);
    let mut cfg = ConvConfig::new(kh, kw, 1 + rng.below(4), 1 + rng.below(4));
    cfg.stride_h = 1 + rng.below(2);
    cfg.stride_w = 1 + rng.below(2);
    if allow_pad {
        cfg.pad_h = rng.below(kh);
        cfg.pad_w = rng.below(kw);
    }
    cfg.has_bias = rng.bernoulli(0.5);
    (cfg, [1 + rng.below(2), cfg.c_in, kh + rng.below(6), kw + rng.below(6)])
}

fn uniform<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.range(-1.0, 1.0)))
}

/// `W_S` slices that are symmetric with equal column sums:
/// `P B P + c J / n + g I` with `P` the centering projector.
pub fn symmetric_balanced_shape_weight(n: usize, c_in: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut out = Tensor::zeros(&[n, n, c_in]);
    for ch in 0..c_in {
        let mut b = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.normal();
                b[i * n + j] = v;
                b[j * n + i] = v;
            }
        }
        let row_mean: Vec<f64> = (0..n).map(|i| b[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let all_mean = row_mean.iter().sum::<f64>() / n as f64;
        let (c, g) = (rng.normal(), 1.0 + 0.3 * rng.normal());
        for i in 0..n {
            for j in 0..=i {
                let centred = b[i * n + j] - row_mean[i] - row_mean[j] + all_mean;
                let v = centred + c / n as f64 + if i == j { g } else { 0.0 };
                out.data_mut()[(i * n + j) * c_in + ch] = v;
                out.data_mut()[(j * n + i) * c_in + ch] = v;
            }
        }
    }
    out
}

/// Production convolution against the nested-loop reference.
pub fn check_conv_paths(draws: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = Rng::derive(seed, 10);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let (cfg, dims) = random_layer(&mut rng, true);
        let std = (2.0 / (cfg.taps() * cfg.c_in) as f64).sqrt();
        let k64 = Tensor::<f64>::from_fn(&cfg.kernel_shape(), |_| rng.normal() * std);
        let x64 = uniform::<f64>(&dims, &mut rng);
        let b64 = cfg.has_bias.then(|| uniform::<f64>(&[cfg.c_out], &mut rng));
        let (k32, x32, b32) = (k64.cast::<f32>(), x64.cast::<f32>(), b64.as_ref().map(|b| b.cast::<f32>()));
        worst64 = worst64.max(conv2d(&x64, &k64, b64.as_ref(), &cfg)?.max_abs_diff(&conv2d_direct(
            &x64,
            &k64,
            b64.as_ref(),
            &cfg,
        )?)?);
        worst32 = worst32.max(conv2d(&x32, &k32, b32.as_ref(), &cfg)?.max_abs_diff(&conv2d_direct(
            &x32,
            &k32,
            b32.as_ref(),
            &cfg,
        )?)? as f64);
    }
    Ok(CheckOutcome::new(
        "conv path equivalence",
        worst32 <= 1e-6 && worst64 <= 1e-12,
        format!("{draws} draws, max diff f32 {worst32:.2e}, f64 {worst64:.2e}"),
    ))
}

fn init_gap<T: Scalar>(cfg: &ConvConfig, dims: &[usize], seed: u64, rng: &mut Rng) -> Result<f64> {
    let p = init_params::<T>(cfg, seed)?;
    let x = uniform::<T>(dims, rng);
    let a = shapeconv_forward(&x, &p)?;
    let b = conv2d(&x, &p.kernel, p.bias.as_ref(), cfg)?;
    Ok(a.max_abs_diff(&b)?.as_f64())
}

/// Freshly initialized layers behave exactly like vanilla convolutions.
pub fn check_init_equivalence(draws: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = Rng::derive(seed, 11);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for k in 0..draws {
        let (cfg, dims) = random_layer(&mut rng, true);
        worst32 = worst32.max(init_gap::<f32>(&cfg, &dims, seed ^ k as u64, &mut rng)?);
        worst64 = worst64.max(init_gap::<f64>(&cfg, &dims, seed ^ k as u64, &mut rng)?);
    }
    Ok(CheckOutcome::new(
        "init equivalence",
        worst32 <= 1e-6 && worst64 <= 1e-12,
        format!("{draws} draws, max diff f32 {worst32:.2e}, f64 {worst64:.2e}"),
    ))
}

/// The fused kernel reproduces the unfused layer for arbitrary parameters.
pub fn check_fusion(draws: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = Rng::derive(seed, 12);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let (cfg, dims) = random_layer(&mut rng, true);
        let p = random_shapeconv_params(cfg, &mut rng);
        let x = uniform::<f64>(&dims, &mut rng);
        let f = fuse(&p)?;
        let fused = conv2d(&x, &f.kernel, f.bias.as_ref(), &f.cfg)?;
        worst = worst.max(fused.max_abs_diff(&shapeconv_forward(&x, &p)?)?);
    }
    Ok(CheckOutcome::new("fusion exactness", worst <= 1e-12, format!("{draws} draws, max diff {worst:.2e}")))
}

/// Discrepancy statistics between the patch-side and kernel-side layers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchKernelGap {
    /// Identity `W_S`, `W_B = 1`: expected bitwise equal.
    pub identity_init: f64,
    /// Identity `W_S`, random `W_B`.
    pub identity_any_base: f64,
    /// Symmetric `W_S` with equal column sums.
    pub symmetric_balanced: f64,
    /// Unconstrained `W_S`, absolute and relative to the output scale.
    pub arbitrary_abs: f64,
    pub arbitrary_rel: f64,
}

pub fn measure_patch_kernel_gap(draws: usize, seed: u64) -> Result<PatchKernelGap> {
    let mut rng = Rng::derive(seed, 13);
    let mut gap = PatchKernelGap::default();
    for _ in 0..draws {
        let (cfg, dims) = random_layer(&mut rng, true);
        let x = uniform::<f64>(&dims, &mut rng);
        let n = cfg.taps();
        let diff = |p: &ShapeConvParams<f64>| -> Result<(f64, f64)> {
            let kernel_side = shapeconv_forward(&x, p)?;
            let d = shapeconv_forward_patchside(&x, p)?.max_abs_diff(&kernel_side)?;
            Ok((d, d / kernel_side.max_abs().max(1e-300)))
        };
        let mut p = random_shapeconv_params(cfg, &mut rng);
        p.shape_weight = identity_shape_weight(n, cfg.c_in);
        p.base_weight = 1.0;
        gap.identity_init = gap.identity_init.max(diff(&p)?.0);
        p.base_weight = 2.0 * rng.normal();
        gap.identity_any_base = gap.identity_any_base.max(diff(&p)?.0);
        p.shape_weight = symmetric_balanced_shape_weight(n, cfg.c_in, &mut rng);
        gap.symmetric_balanced = gap.symmetric_balanced.max(diff(&p)?.0);
        let arbitrary = random_shapeconv_params(cfg, &mut rng);
        let (abs, rel) = diff(&arbitrary)?;
        gap.arbitrary_abs = gap.arbitrary_abs.max(abs);
        gap.arbitrary_rel = gap.arbitrary_rel.max(rel);
    }
    Ok(gap)
}

/// Patch-side and kernel-side layers agree under the sufficient conditions;
/// the unconstrained gap is reported only.
pub fn check_patch_kernel(draws: usize, seed: u64) -> Result<CheckOutcome> {
    let g = measure_patch_kernel_gap(draws, seed)?;
    Ok(CheckOutcome::new(
        "patch/kernel equivalence",
        g.identity_init == 0.0 && g.identity_any_base <= 1e-12 && g.symmetric_balanced <= 1e-10,
        format!(
            "{draws} draws, identity {:.1e} / any W_B {:.1e}, symmetric {:.1e}; unconstrained gap {:.2e} ({:.1}% of output)",
            g.identity_init,
            g.identity_any_base,
            g.symmetric_balanced,
            g.arbitrary_abs,
            100.0 * g.arbitrary_rel
        ),
    ))
}

/// A patch on a 1/64 grid whose per-channel mean is itself on that grid,
/// so decomposition and offsets involve no rounding.
pub fn dyadic_patch(kh: usize, kw: usize, c: usize, rng: &mut Rng) -> Tensor<f64> {
    let n = kh * kw;
    let mut p = Tensor::zeros(&[kh, kw, c]);
    for ch in 0..c {
        let mean = (rng.below(256) as f64 - 128.0) / 64.0;
        let mut dev: Vec<i64> = (0..n).map(|_| rng.below(129) as i64 - 64).collect();
        let total: i64 = dev.iter().sum();
        dev[0] -= total;
        for (t, d) in dev.iter().enumerate() {
            p.data_mut()[t * c + ch] = mean + *d as f64 / 64.0;
        }
    }
    p
}

/// The shape component ignores per-channel offsets; a layer with `W_B = 0`
/// and identity `W_S` ignores them too away from padding.
pub fn check_shape_invariance(draws: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = Rng::derive(seed, 14);
    let mut bitwise = true;
    let mut float_gap = 0.0f64;
    let mut layer_gap = 0.0f64;
    for _ in 0..draws {
        let (kh, kw, c) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let p = dyadic_patch(kh, kw, c, &mut rng);
        let offsets: Vec<f64> = (0..c).map(|_| (rng.below(1024) as f64 - 512.0) / 64.0).collect();
        let shifted = Tensor::from_fn(p.shape(), |i| p.data()[i] + offsets[i % c]);
        bitwise &= decompose_patch(&shifted)?.shape == decompose_patch(&p)?.shape;

        let q = uniform::<f64>(&[kh, kw, c], &mut rng);
        let q_shift = Tensor::from_fn(q.shape(), |i| q.data()[i] + offsets[i % c] + 0.37);
        float_gap = float_gap.max(decompose_patch(&q_shift)?.shape.max_abs_diff(&decompose_patch(&q)?.shape)?);

        let (cfg, dims) = random_layer(&mut rng, false);
        let mut params = random_shapeconv_params(cfg, &mut rng);
        params.base_weight = 0.0;
        params.shape_weight = identity_shape_weight(cfg.taps(), cfg.c_in);
        let x = uniform::<f64>(&dims, &mut rng);
        let plane = dims[2] * dims[3];
        let offs: Vec<f64> = (0..dims[1]).map(|_| 3.0 * rng.normal()).collect();
        let x_shift = Tensor::from_fn(x.shape(), |i| x.data()[i] + offs[(i / plane) % dims[1]]);
        layer_gap =
            layer_gap.max(shapeconv_forward(&x_shift, &params)?.max_abs_diff(&shapeconv_forward(&x, &params)?)?);
    }
    Ok(CheckOutcome::new(
        "shape invariance",
        bitwise && float_gap <= 1e-12 && layer_gap <= 1e-10,
        format!("{draws} draws, grid patches bitwise {bitwise}, float patches {float_gap:.1e}, layer {layer_gap:.1e}"),
    ))
}

/// Hand-computed metric and trimap values.
pub fn check_metric_oracles() -> Result<CheckOutcome> {
    let m = fcn_metrics(&ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]])?)?;
    let expected = [0.7, 17.0 / 24.0, 15.0 / 28.0, 19.0 / 35.0];
    let got = [m.pixel_acc, m.mean_acc, m.mean_iou, m.fw_iou];
    let metrics_ok = got.iter().zip(expected).all(|(g, e)| (g - e).abs() <= 1e-12);
    let truth: Vec<u8> = (0..16).map(|i| u8::from(i % 4 >= 2)).collect();
    let pred: Vec<u8> =
        truth.iter().enumerate().map(|(i, &t)| if matches!(i % 4, 1 | 2) { 1 - t } else { t }).collect();
    let curve = trimap_curve(&pred, &truth, 4, 4, &[1, 2], 255)?;
    let trimap_ok = curve.fractions == [1.0, 0.5];
    Ok(CheckOutcome::new(
        "metric oracles",
        metrics_ok && trimap_ok,
        format!("fcn {got:?}, trimap {:?}", curve.fractions),
    ))
}

pub fn check_gradients(cfg: &GradCheckConfig) -> Result<CheckOutcome> {
    let report = run_gradcheck(cfg)?;
    let worst = report.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let entries: usize = report.rows.iter().map(|r| r.entries).sum();
    Ok(CheckOutcome::new(
        "gradient check",
        report.passed(),
        format!("{} groups, {entries} entries, worst rel err {worst:.2e}", report.rows.len()),
    ))
}

/// Vanilla and shape-aware twins agree at initialization, fusion preserves
/// the network function and checkpoints round-trip bitwise.
pub fn check_model_twins(seed: u64) -> Result<CheckOutcome> {
    let vanilla = build_model::<f32>(&ModelSpec::toy(4, 6, 8, LayerKind::Conv), seed)?;
    let shaped = build_model::<f32>(&ModelSpec::toy(4, 6, 8, LayerKind::ShapeConv), seed)?;
    let mut rng = Rng::derive(seed, 15);
    let x = uniform::<f32>(&[2, 4, 16, 16], &mut rng);
    let twin_gap = shaped.forward(&x)?.max_abs_diff(&vanilla.forward(&x)?)?;
    let mut moved = shaped.clone();
    moved.visit_params_mut(|name, data| {
        if name.ends_with("_weight") || name.ends_with(".bias") {
            data.iter_mut().for_each(|v| *v += 0.05 * rng.normal() as f32);
        }
    });
    let fuse_gap = moved.fused()?.forward(&x)?.max_abs_diff(&moved.forward(&x)?)?;
    let ckpt = Checkpoint { model: moved.clone(), optimizer: None, seed };
    let back: Checkpoint<f32> = decode_checkpoint(&encode_checkpoint(&ckpt)?)?;
    let round_trip = back == ckpt && back.model.forward(&x)? == moved.forward(&x)?;
    Ok(CheckOutcome::new(
        "model twins and fusion",
        twin_gap <= 1e-6 && fuse_gap <= 1e-6 && round_trip,
        format!("twin gap {twin_gap:.1e}, fused gap {fuse_gap:.1e}, checkpoint round trip {round_trip}"),
    ))
}

fn kernels_and_biases(model: &Model<f32>) -> Vec<(String, Tensor<f32>)> {
    model.named_params().into_iter().filter(|(n, _)| n.ends_with(".kernel") || n.ends_with(".bias")).collect()
}

/// A short training run: frozen shape-aware training reproduces the vanilla
/// run bitwise, and reruns reproduce their log.
pub fn check_training_reproducibility(seed: u64) -> Result<CheckOutcome> {
    let ds =
        generate_dataset(&DatasetConfig { seed, train_n: 16, test_n: 8, height: 16, width: 16, ..Default::default() })?;
    let vanilla_cfg = TrainConfig { epochs: 2, batch_size: 4, seed, layer_kind: LayerKind::Conv, ..Default::default() };
    let frozen_cfg = TrainConfig {
        layer_kind: LayerKind::ShapeConv,
        freeze_base_weight: true,
        freeze_shape_weight: true,
        ..vanilla_cfg.clone()
    };
    let run = |cfg: &TrainConfig| -> Result<_> {
        train(build_model::<f32>(&ModelSpec::toy(4, 6, 4, cfg.layer_kind), seed)?, &ds, cfg)
    };
    let vanilla = run(&vanilla_cfg)?;
    let frozen = run(&frozen_cfg)?;
    let again = run(&vanilla_cfg)?;
    let ablation = kernels_and_biases(&vanilla.model) == kernels_and_biases(&frozen.model) && vanilla.log == frozen.log;
    let rerun = again.log.to_csv() == vanilla.log.to_csv() && again.model == vanilla.model;
    Ok(CheckOutcome::new(
        "training reproducibility",
        ablation && rerun,
        format!("frozen == vanilla {ablation}, rerun bitwise {rerun}"),
    ))
}

/// Every check, at sizes that finish well within a few minutes on one core.
pub fn run_selftest(seed: u64) -> Result<SelftestReport> {
    Ok(SelftestReport {
        checks: vec![
            check_conv_paths(200, seed)?,
            check_init_equivalence(100, seed)?,
            check_fusion(100, seed)?,
            check_patch_kernel(100, seed)?,
            check_shape_invariance(100, seed)?,
            check_metric_oracles()?,
            check_gradients(&GradCheckConfig { seed, ..GradCheckConfig::default() })?,
            check_model_twins(seed)?,
            check_training_reproducibility(seed)?,
        ],
    })
}
