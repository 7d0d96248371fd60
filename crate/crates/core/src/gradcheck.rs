//! Central-difference checks of every hand-written gradient.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, conv2d_backward, ConvConfig};
use crate::error::Result;
use crate::net::{build_model, LayerKind, Model, ModelSpec};
use crate::rng::Rng;
use crate::shapeconv::{identity_shape_weight, shapeconv_backward, shapeconv_forward, ShapeConvParams};
use crate::tensor::Tensor;
use crate::train::cross_entropy_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Central-difference step.
    pub eps: f64,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Random layer instances per check.
    pub instances: usize,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to rounding compare on an absolute scale.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { seed: 0, eps: 1e-5, tol: 1e-4, instances: 20, abs_floor: 1e-6 }
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub check: String,
    pub entries: usize,
    /// Entries left out because the two probes straddled a ReLU kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<28} {:>8} {:>8} {:>12}  result\n", "check", "entries", "skipped", "max_rel_err");
        for r in &self.rows {
            let verdict = if r.passed { "pass" } else { "FAIL" };
            writeln!(s, "{:<28} {:>8} {:>8} {:>12.3e}  {verdict}", r.check, r.entries, r.skipped, r.max_rel_err)
                .expect("write to String");
        }
        s
    }
}

/// Running worst case for one row.
struct Tally {
    entries: usize,
    skipped: usize,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Tally { entries: 0, skipped: 0, worst: 0.0 }
    }

    fn add(&mut self, analytic: f64, numeric: f64, floor: f64) {
        self.entries += 1;
        self.worst = self.worst.max(rel_err(analytic, numeric, floor));
    }

    fn row(self, check: &str, tol: f64) -> GradCheckRow {
        GradCheckRow {
            check: check.to_string(),
            entries: self.entries,
            skipped: self.skipped,
            max_rel_err: self.worst,
            passed: self.entries > 0 && self.worst <= tol,
        }
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn random_conv_config(rng: &mut Rng) -> (ConvConfig, [usize; 4]) {
    let kh = 1 + rng.below(3);
    let kw = 1 + rng.below(3);
    let mut cfg = ConvConfig::new(kh, kw, 1 + rng.below(3), 1 + rng.below(3));
    cfg.stride_h = 1 + rng.below(2);
    cfg.stride_w = 1 + rng.below(2);
    cfg.pad_h = rng.below(2);
    cfg.pad_w = rng.below(2);
    cfg.has_bias = rng.bernoulli(0.7);
    let dims = [1 + rng.below(2), cfg.c_in, kh + rng.below(4), kw + rng.below(4)];
    (cfg, dims)
}

/// Parameters away from initialization, so every term of the reweighting
/// contributes.
pub fn random_shapeconv_params(cfg: ConvConfig, rng: &mut Rng) -> ShapeConvParams<f64> {
    let n = cfg.taps();
    let mut shape_weight = identity_shape_weight::<f64>(n, cfg.c_in);
    for v in shape_weight.data_mut() {
        *v += 0.3 * rng.normal();
    }
    ShapeConvParams {
        kernel: random(&cfg.kernel_shape(), rng),
        base_weight: 1.0 + 0.5 * rng.normal(),
        shape_weight,
        bias: cfg.has_bias.then(|| random(&[cfg.c_out], rng)),
        cfg,
    }
}

/// Probes `f` at `x[i] +- eps` for every entry and compares against `grad`.
fn probe(
    tally: &mut Tally,
    x: &Tensor<f64>,
    grad: &Tensor<f64>,
    eps: f64,
    floor: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) {
    for i in 0..x.len() {
        let mut hi = x.clone();
        hi.data_mut()[i] += eps;
        let mut lo = x.clone();
        lo.data_mut()[i] -= eps;
        tally.add(grad.data()[i], (f(&hi) - f(&lo)) / (2.0 * eps), floor);
    }
}

/// Checks input, kernel, base weight, shape weight and bias gradients of a
/// shape-aware layer under the loss `<y, r>`.
pub fn check_shapeconv_layer(cfg: &GradCheckConfig) -> Result<Vec<GradCheckRow>> {
    let mut rng = Rng::derive(cfg.seed, 1);
    let mut t = [Tally::new(), Tally::new(), Tally::new(), Tally::new(), Tally::new()];
    let (eps, floor) = (cfg.eps, cfg.abs_floor);
    for _ in 0..cfg.instances {
        let (conv, dims) = random_conv_config(&mut rng);
        let p = random_shapeconv_params(conv, &mut rng);
        let x = random(&dims, &mut rng);
        let y = shapeconv_forward(&x, &p)?;
        let r = random(y.shape(), &mut rng).scale(1.0 / (y.len() as f64).sqrt());
        let g = shapeconv_backward(&x, &p, &r)?;
        let loss = |x: &Tensor<f64>, p: &ShapeConvParams<f64>| {
            shapeconv_forward(x, p).expect("probe forward").dot(&r).expect("same shape")
        };
        probe(&mut t[0], &x, &g.grad_input, eps, floor, |xp| loss(xp, &p));
        probe(&mut t[1], &p.kernel, &g.grad_kernel, eps, floor, |k| {
            loss(&x, &ShapeConvParams { kernel: k.clone(), ..p.clone() })
        });
        let wb = Tensor::scalar(p.base_weight);
        probe(&mut t[2], &wb, &Tensor::scalar(g.grad_base_weight), eps, floor, |w| {
            loss(&x, &ShapeConvParams { base_weight: w.data()[0], ..p.clone() })
        });
        probe(&mut t[3], &p.shape_weight, &g.grad_shape_weight, eps, floor, |w| {
            loss(&x, &ShapeConvParams { shape_weight: w.clone(), ..p.clone() })
        });
        if let (Some(b), Some(gb)) = (&p.bias, &g.grad_bias) {
            probe(&mut t[4], b, gb, eps, floor, |b| loss(&x, &ShapeConvParams { bias: Some(b.clone()), ..p.clone() }));
        }
    }
    let names =
        ["shapeconv.input", "shapeconv.kernel", "shapeconv.base_weight", "shapeconv.shape_weight", "shapeconv.bias"];
    Ok(t.into_iter().zip(names).map(|(t, n)| t.row(n, cfg.tol)).collect())
}

/// Same as [`check_shapeconv_layer`] for the vanilla layer.
pub fn check_conv_layer(cfg: &GradCheckConfig) -> Result<Vec<GradCheckRow>> {
    let mut rng = Rng::derive(cfg.seed, 2);
    let mut t = [Tally::new(), Tally::new(), Tally::new()];
    let (eps, floor) = (cfg.eps, cfg.abs_floor);
    for _ in 0..cfg.instances {
        let (conv, dims) = random_conv_config(&mut rng);
        let k = random(&conv.kernel_shape(), &mut rng);
        let b = conv.has_bias.then(|| random(&[conv.c_out], &mut rng));
        let x = random(&dims, &mut rng);
        let y = conv2d(&x, &k, b.as_ref(), &conv)?;
        let r = random(y.shape(), &mut rng).scale(1.0 / (y.len() as f64).sqrt());
        let g = conv2d_backward(&x, &k, &conv, &r)?;
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: Option<&Tensor<f64>>| {
            conv2d(x, k, b, &conv).expect("probe forward").dot(&r).expect("same shape")
        };
        probe(&mut t[0], &x, &g.grad_input, eps, floor, |xp| loss(xp, &k, b.as_ref()));
        probe(&mut t[1], &k, &g.grad_kernel, eps, floor, |kp| loss(&x, kp, b.as_ref()));
        if let (Some(b), Some(gb)) = (&b, &g.grad_bias) {
            probe(&mut t[2], b, gb, eps, floor, |bp| loss(&x, &k, Some(bp)));
        }
    }
    let names = ["conv.input", "conv.kernel", "conv.bias"];
    Ok(t.into_iter().zip(names).map(|(t, n)| t.row(n, cfg.tol)).collect())
}

fn perturbed(model: &Model<f64>, name: &str, index: usize, delta: f64) -> Model<f64> {
    let mut m = model.clone();
    m.visit_params_mut(|n, data| {
        if n == name {
            data[index] += delta;
        }
    });
    m
}

/// Whole-network check on a micro model with random, non-zero biases,
/// under the cross-entropy loss on random labels. One row per parameter
/// group (kernel, bias, base weight, shape weight).
pub fn check_network(cfg: &GradCheckConfig, kind: LayerKind) -> Result<Vec<GradCheckRow>> {
    let spec = ModelSpec::toy(2, 3, 1, kind);
    let mut rng = Rng::derive(cfg.seed, 3);
    let mut model = build_model::<f64>(&spec, cfg.seed)?;
    model.visit_params_mut(|name, data| {
        for v in data.iter_mut() {
            if name.ends_with(".bias") {
                *v = 0.3 * rng.normal();
            } else if name.ends_with(".base_weight") || name.ends_with(".shape_weight") {
                *v += 0.2 * rng.normal();
            }
        }
    });
    let x = random(&[2, 2, 8, 8], &mut rng);
    let labels: Vec<u8> = (0..2 * 64).map(|_| rng.below(3) as u8).collect();
    let (logits, cache) = model.forward_cached(&x)?;
    let (_, grad_logits) = cross_entropy_loss(&logits, &labels, 255)?;
    let grads = model.backward_cached(&cache, &grad_logits)?;
    let loss_and_pattern = |m: &Model<f64>| {
        let (z, c) = m.forward_cached(&x).expect("probe forward");
        (cross_entropy_loss(&z, &labels, 255).expect("probe loss").0, c.active_units())
    };
    let groups = ["kernel", "bias", "base_weight", "shape_weight"];
    let mut tallies: Vec<Tally> = groups.iter().map(|_| Tally::new()).collect();
    for (name, g) in &grads {
        let group = groups.iter().position(|s| name.ends_with(&format!(".{s}"))).expect("known parameter group");
        for i in 0..g.len() {
            let (hi, pattern_hi) = loss_and_pattern(&perturbed(&model, name, i, cfg.eps));
            let (lo, pattern_lo) = loss_and_pattern(&perturbed(&model, name, i, -cfg.eps));
            if pattern_hi != pattern_lo {
                tallies[group].skipped += 1;
                continue;
            }
            tallies[group].add(g.data()[i], (hi - lo) / (2.0 * cfg.eps), cfg.abs_floor);
        }
    }
    let prefix = match kind {
        LayerKind::Conv => "net.vanilla",
        LayerKind::ShapeConv => "net.shapeconv",
    };
    Ok(tallies
        .into_iter()
        .zip(groups)
        .filter(|(t, _)| t.entries + t.skipped > 0)
        .map(|(t, g)| t.row(&format!("{prefix}.{g}"), cfg.tol))
        .collect())
}

/// Every check above.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rows = check_conv_layer(cfg)?;
    rows.extend(check_shapeconv_layer(cfg)?);
    rows.extend(check_network(cfg, LayerKind::Conv)?);
    rows.extend(check_network(cfg, LayerKind::ShapeConv)?);
    Ok(GradCheckReport { rows })
}
