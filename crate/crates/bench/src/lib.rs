//! Forward-pass timing of a vanilla convolution, a shape-aware layer that
//! reassembles its kernel on every call, and the same layer after fusion.
//!
//! All three kinds run on the same input with weights chosen so that their
//! outputs coincide, and that agreement is checked before anything is timed.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use shapeconv::conv::{conv2d, ConvConfig};
use shapeconv::error::{Error, Result};
use shapeconv::rng::Rng;
use shapeconv::shapeconv::{fuse, identity_shape_weight, shapeconv_forward, FusedConv, ShapeConvParams};
use shapeconv::tensor::Tensor;

pub const MIN_RUNS: usize = 30;
pub const MIN_WARMUP: usize = 5;
pub const CSV_HEADER: &str = "case,kind,median_us,iqr_us,flops,params";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    Vanilla,
    ShapeConvUnfused,
    ShapeConvFused,
}

impl BenchKind {
    pub const ALL: [BenchKind; 3] = [BenchKind::Vanilla, BenchKind::ShapeConvUnfused, BenchKind::ShapeConvFused];

    pub fn label(self) -> &'static str {
        match self {
            BenchKind::Vanilla => "vanilla",
            BenchKind::ShapeConvUnfused => "shapeconv-unfused",
            BenchKind::ShapeConvFused => "shapeconv-fused",
        }
    }
}

/// An `N x C x H x W` input convolved by a same-padded `k x k` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchCase {
    pub dims: [usize; 4],
    pub kernel: usize,
    pub c_out: usize,
}

impl BenchCase {
    pub fn label(&self) -> String {
        let [n, c, h, w] = self.dims;
        format!("{n}x{c}x{h}x{w}_k{}_co{}", self.kernel, self.c_out)
    }

    pub fn cfg(&self) -> ConvConfig {
        ConvConfig::same(self.kernel, self.dims[1], self.c_out)
    }

    pub fn validate(&self) -> Result<()> {
        let [n, c, h, w] = self.dims;
        if n == 0 || c == 0 || h == 0 || w == 0 || self.c_out == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("degenerate benchmark dims {:?}", self.dims)));
        }
        self.cfg().validate()?;
        self.cfg().output_hw(h, w)?;
        Ok(())
    }

    /// `2 x` multiply-adds of one forward pass of `kind`.
    pub fn flops(&self, kind: BenchKind) -> Result<u64> {
        let cfg = self.cfg();
        let conv = self.dims[0] as u64 * cfg.flops(self.dims[2], self.dims[3])?;
        Ok(match kind {
            BenchKind::ShapeConvUnfused => conv + self.shape_params_template().assemble_flops(),
            _ => conv,
        })
    }

    /// Parameters the forward pass of `kind` reads.
    pub fn params(&self, kind: BenchKind) -> usize {
        let cfg = self.cfg();
        match kind {
            BenchKind::ShapeConvUnfused => cfg.param_count() + self.shape_params_template().extra_param_count(),
            _ => cfg.param_count(),
        }
    }

    fn shape_params_template(&self) -> ShapeConvParams<f32> {
        let cfg = self.cfg();
        ShapeConvParams {
            kernel: Tensor::zeros(&cfg.kernel_shape()),
            base_weight: 1.0,
            shape_weight: identity_shape_weight(cfg.taps(), cfg.c_in),
            bias: None,
            cfg,
        }
    }
}

/// Inputs and weights shared by all kinds of one case.
pub struct Workload {
    pub case: BenchCase,
    pub input: Tensor<f32>,
    pub shape: ShapeConvParams<f32>,
    pub fused: FusedConv<f32>,
}

impl Workload {
    /// Trained-looking shape-aware parameters; the vanilla kind runs with
    /// the fused kernel so that every kind computes the same function.
    pub fn new(case: BenchCase, seed: u64) -> Result<Self> {
        case.validate()?;
        let cfg = case.cfg();
        let mut rng = Rng::new(seed);
        let std = (2.0 / (cfg.taps() * cfg.c_in) as f64).sqrt();
        let mut shape_weight = identity_shape_weight::<f32>(cfg.taps(), cfg.c_in);
        for v in shape_weight.data_mut() {
            *v += (0.1 * rng.normal()) as f32;
        }
        let shape = ShapeConvParams {
            kernel: Tensor::from_fn(&cfg.kernel_shape(), |_| (std * rng.normal()) as f32),
            base_weight: rng.range(0.5, 1.5) as f32,
            shape_weight,
            bias: Some(Tensor::from_fn(&[cfg.c_out], |_| (0.1 * rng.normal()) as f32)),
            cfg,
        };
        let input = Tensor::from_fn(&case.dims, |_| rng.range(-1.0, 1.0) as f32);
        let fused = fuse(&shape)?;
        Ok(Workload { case, input, shape, fused })
    }

    pub fn run(&self, kind: BenchKind) -> Result<Tensor<f32>> {
        match kind {
            BenchKind::ShapeConvUnfused => shapeconv_forward(&self.input, &self.shape),
            BenchKind::Vanilla | BenchKind::ShapeConvFused => {
                conv2d(&self.input, &self.fused.kernel, self.fused.bias.as_ref(), &self.fused.cfg)
            }
        }
    }

    /// Largest output difference between any kind and the vanilla one.
    pub fn max_output_gap(&self) -> Result<f32> {
        let reference = self.run(BenchKind::Vanilla)?;
        let mut worst = 0.0f32;
        for kind in BenchKind::ALL {
            worst = worst.max(self.run(kind)?.max_abs_diff(&reference)?);
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchEntry {
    pub case: String,
    pub kind: BenchKind,
    pub runs: usize,
    pub warmup: usize,
    pub median_us: f64,
    pub iqr_us: f64,
    pub flops: u64,
    pub params: usize,
}

impl BenchEntry {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{},{}",
            self.case,
            self.kind.label(),
            self.median_us,
            self.iqr_us,
            self.flops,
            self.params
        )
    }
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of no samples");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range.
pub fn summarize(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile(&s, 0.5), quantile(&s, 0.75) - quantile(&s, 0.25))
}

fn check_counts(runs: usize, warmup: usize) -> Result<()> {
    if runs < MIN_RUNS || warmup < MIN_WARMUP {
        return Err(Error::Config(format!("need at least {MIN_RUNS} runs after {MIN_WARMUP} warmups")));
    }
    Ok(())
}

/// Output agreement tolerance between kinds, checked before timing.
pub const OUTPUT_TOLERANCE: f32 = 1e-6;

/// Times the given kinds round-robin, rotating the order every round so no
/// kind always runs first.
pub fn bench_kinds(
    case: BenchCase,
    kinds: &[BenchKind],
    runs: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<BenchEntry>> {
    check_counts(runs, warmup)?;
    let work = Workload::new(case, seed)?;
    let gap = work.max_output_gap()?;
    if gap > OUTPUT_TOLERANCE {
        return Err(Error::Shape(format!("benchmark kinds disagree by {gap:e}")));
    }
    let mut times: Vec<Vec<f64>> = vec![Vec::with_capacity(runs); kinds.len()];
    for round in 0..warmup + runs {
        for step in 0..kinds.len() {
            let k = (round + step) % kinds.len();
            let start = Instant::now();
            let out = work.run(kinds[k])?;
            let elapsed = start.elapsed().as_secs_f64() * 1e6;
            std::hint::black_box(out);
            if round >= warmup {
                times[k].push(elapsed);
            }
        }
    }
    kinds
        .iter()
        .zip(times)
        .map(|(&kind, t)| {
            let (median_us, iqr_us) = summarize(&t);
            Ok(BenchEntry {
                case: case.label(),
                kind,
                runs,
                warmup,
                median_us,
                iqr_us,
                flops: case.flops(kind)?,
                params: case.params(kind),
            })
        })
        .collect()
}

/// One kind on its own.
pub fn bench_forward(case: BenchCase, kind: BenchKind, runs: usize, warmup: usize, seed: u64) -> Result<BenchEntry> {
    Ok(bench_kinds(case, &[kind], runs, warmup, seed)?.remove(0))
}

/// All three kinds, interleaved.
pub fn compare(case: BenchCase, runs: usize, warmup: usize, seed: u64) -> Result<Vec<BenchEntry>> {
    bench_kinds(case, &BenchKind::ALL, runs, warmup, seed)
}

/// Appends rows to a CSV report, writing the header only when the file is
/// new or empty. Existing rows are never touched.
pub fn append_csv(path: &Path, entries: &[BenchEntry]) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if file.metadata()?.len() == 0 {
        writeln!(file, "{CSV_HEADER}")?;
    }
    for e in entries {
        writeln!(file, "{}", e.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: BenchCase = BenchCase { dims: [1, 4, 8, 8], kernel: 3, c_out: 4 };

    #[test]
    fn quantiles() {
        assert_eq!(summarize(&[3.0, 1.0, 2.0]), (2.0, 1.0));
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[5.0], 0.25), 5.0);
    }

    #[test]
    fn counts_follow_the_layer_arithmetic() {
        let cfg = SMALL.cfg();
        assert_eq!(SMALL.params(BenchKind::Vanilla), 9 * 4 * 4 + 4);
        assert_eq!(SMALL.params(BenchKind::ShapeConvFused), SMALL.params(BenchKind::Vanilla));
        assert_eq!(SMALL.params(BenchKind::ShapeConvUnfused), 9 * 4 * 4 + 4 + 1 + 81 * 4);
        assert_eq!(SMALL.flops(BenchKind::Vanilla).unwrap(), 2 * 64 * 4 * 9 * 4);
        assert_eq!(SMALL.flops(BenchKind::ShapeConvFused).unwrap(), cfg.flops(8, 8).unwrap());
        assert!(SMALL.flops(BenchKind::ShapeConvUnfused).unwrap() > SMALL.flops(BenchKind::ShapeConvFused).unwrap());
    }

    #[test]
    fn kinds_agree_and_degenerate_cases_fail() {
        assert!(Workload::new(SMALL, 1).unwrap().max_output_gap().unwrap() <= OUTPUT_TOLERANCE);
        let bad = BenchCase { dims: [0, 4, 8, 8], ..SMALL };
        assert!(Workload::new(bad, 1).is_err());
        assert!(compare(SMALL, 10, 5, 0).is_err());
    }

    #[test]
    fn csv_is_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        let entries = compare(SMALL, MIN_RUNS, MIN_WARMUP, 0).unwrap();
        append_csv(&path, &entries).unwrap();
        append_csv(&path, &entries[..1]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], lines[4]);
    }
}
