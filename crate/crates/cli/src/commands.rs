//! Subcommand implementations. Each writes into its own run directory
//! `<out>/<timestamp>-seed<seed>[-k]` and never touches anything else.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use shapeconv::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use shapeconv::data::{
    generate_dataset, generate_split, make_batch, read_dataset, write_dataset, Dataset, DatasetConfig, InputMode,
    Normalization, SegmentationSample,
};
use shapeconv::error::Error;
use shapeconv::gradcheck::{run_gradcheck, GradCheckConfig};
use shapeconv::net::{build_model, Model};
use shapeconv::rng::Rng;
use shapeconv::train::{evaluate, train_with, EvalReport};
use shapeconv::verify::run_selftest;
use shapeconv_bench::{append_csv, compare, BenchCase};

use crate::config::RunConfig;
use crate::{BenchArgs, Command, EvalArgs, FuseArgs, GenDataArgs, GradcheckArgs, SelftestArgs, TrainArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Model(_) => CliError::Usage(msg),
            Error::NonFinite(_) => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Fuse(a) => fuse(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Selftest(a) => selftest(a),
    }
}

/// Creates a fresh run directory under `out`. An existing directory of the
/// same name gets a numeric suffix instead of being reused.
pub fn create_run_dir(out: &Path, seed: u64) -> CliResult<PathBuf> {
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    let stem = format!("{}-seed{seed}", chrono::Local::now().format("%Y%m%d-%H%M%S"));
    for k in 0..1000 {
        let name = if k == 0 { stem.clone() } else { format!("{stem}-{k}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => {
                println!("run directory: {}", dir.display());
                return Ok(dir);
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::Data(format!("cannot create {}: {e}", dir.display()))),
        }
    }
    Err(CliError::Data(format!("no free run directory name under {}", out.display())))
}

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_file(dir, name, text)
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    read_dataset(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> CliResult<Checkpoint<f32>> {
    load_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_eval(dir: &Path, report: &EvalReport) -> CliResult<()> {
    write_file(dir, "metrics.csv", report.metrics.to_csv())?;
    write_file(dir, "trimap.csv", report.trimap.to_csv())?;
    let n = report.confusion.num_classes();
    let mut cm = String::from("truth\\predicted");
    for p in 0..n {
        cm.push_str(&format!(",{p}"));
    }
    cm.push('\n');
    for t in 0..n {
        cm.push_str(&t.to_string());
        for p in 0..n {
            cm.push_str(&format!(",{}", report.confusion.get(t, p)));
        }
        cm.push('\n');
    }
    write_file(dir, "confusion.csv", cm)
}

fn print_eval(report: &EvalReport) {
    let m = &report.metrics;
    println!(
        "pixel_acc {:.4}  mean_acc {:.4}  mean_iou {:.4}  fw_iou {:.4}",
        m.pixel_acc, m.mean_acc, m.mean_iou, m.fw_iou
    );
    let curve: Vec<String> =
        report.trimap.widths.iter().zip(&report.trimap.fractions).map(|(w, f)| format!("{w}px {f:.4}")).collect();
    println!("trimap misclassification: {}", curve.join("  "));
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let cfg = DatasetConfig {
        seed: a.seed,
        train_n: a.train_n,
        test_n: a.test_n,
        height: a.height,
        width: a.width,
        shift_train: a.shift_train,
        shift_test: a.shift_test,
    };
    if cfg.train_n == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(CliError::Usage("train-n, height and width must be positive".into()));
    }
    let dir = create_run_dir(&a.out, a.seed)?;
    write_json(&dir, "config.json", &cfg)?;
    let ds = generate_dataset(&cfg)?;
    let data_dir = dir.join("dataset");
    write_dataset(&data_dir, &ds)?;
    println!("dataset: {} ({} train, {} test)", data_dir.display(), ds.train.len(), ds.test.len());
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(data) = a.data {
        cfg.data.path = Some(data);
    }
    if let Some(layer) = a.layer {
        cfg.train.layer_kind = layer.into();
    }
    cfg.train.freeze_base_weight |= a.freeze_wb;
    cfg.train.freeze_shape_weight |= a.freeze_ws;
    let cfg = cfg.effective();
    cfg.train.validate()?;
    let spec = cfg.model.spec(cfg.train.layer_kind);
    spec.validate()?;

    let dir = create_run_dir(&a.out, cfg.seed)?;
    write_json(&dir, "config.json", &cfg)?;
    let ds = match &cfg.data.path {
        Some(path) => load_dataset(path)?,
        None => generate_dataset(&cfg.data.generator)?,
    };
    let model = build_model::<f32>(&spec, cfg.seed)?;
    let outcome = train_with(model, &ds, &cfg.train, |r| {
        println!("epoch {:>3}  loss {:.5}  pixel_acc {:.4}  mean_iou {:.4}", r.epoch, r.loss, r.pixel_acc, r.mean_iou);
    })?;
    write_file(&dir, "train_log.csv", outcome.log.to_csv())?;
    let ckpt = Checkpoint { model: outcome.model, optimizer: Some(outcome.optimizer), seed: cfg.seed };
    save_checkpoint(&ckpt, &dir.join("checkpoint.sckp"))?;
    let report = evaluate(&ckpt.model, &ds.test, &ds.normalization, &cfg.eval.trimap_widths, cfg.train.batch_size)?;
    write_eval(&dir, &report)?;
    print_eval(&report);
    Ok(())
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    trimap_widths: &'a [usize],
    batch_size: usize,
}

fn eval(a: EvalArgs) -> CliResult<()> {
    if a.batch_size == 0 {
        return Err(CliError::Usage("batch-size must be positive".into()));
    }
    let ckpt = load_model(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let dir = create_run_dir(&a.out, ckpt.seed)?;
    let echo = EvalEcho { ckpt: &a.ckpt, data: &a.data, trimap_widths: &a.trimap_widths, batch_size: a.batch_size };
    write_json(&dir, "config.json", &echo)?;
    let report = evaluate(&ckpt.model, &ds.test, &ds.normalization, &a.trimap_widths, a.batch_size)?;
    write_eval(&dir, &report)?;
    print_eval(&report);
    Ok(())
}

/// Max |logit| change after fusing layers `0..=i`, for every `i`.
pub fn cumulative_fusion_drift(model: &Model<f32>, x: &shapeconv::tensor::Tensor<f32>) -> CliResult<Vec<f64>> {
    let reference = model.forward(x)?;
    let mut partial = model.clone();
    let mut drift = Vec::with_capacity(model.layers.len());
    for i in 0..model.layers.len() {
        partial.layers[i] = partial.layers[i].fused()?;
        drift.push(partial.forward(x)?.max_abs_diff(&reference)? as f64);
    }
    Ok(drift)
}

fn probe_samples(a: &FuseArgs, seed: u64) -> CliResult<(Vec<SegmentationSample>, Normalization)> {
    match &a.data {
        Some(path) => {
            let ds = load_dataset(path)?;
            let n = a.probe.min(ds.test.len());
            Ok((ds.test[..n].to_vec(), ds.normalization))
        }
        None => {
            let generator = DatasetConfig::default();
            let samples = generate_split(
                a.probe,
                Rng::derive(seed, 2).next_u64(),
                generator.shift_test,
                generator.height,
                generator.width,
            )?;
            let norm = Normalization::from_samples(&samples)?;
            Ok((samples, norm))
        }
    }
}

#[derive(Serialize)]
struct FuseEcho<'a> {
    ckpt: &'a Path,
    data: Option<&'a Path>,
    probe: usize,
    tol: f64,
}

fn fuse(a: FuseArgs) -> CliResult<()> {
    if a.probe == 0 {
        return Err(CliError::Usage("probe must be positive".into()));
    }
    let ckpt = load_model(&a.ckpt)?;
    let dir = create_run_dir(&a.out, ckpt.seed)?;
    write_json(&dir, "config.json", &FuseEcho { ckpt: &a.ckpt, data: a.data.as_deref(), probe: a.probe, tol: a.tol })?;
    let (samples, norm) = probe_samples(&a, ckpt.seed)?;
    let refs: Vec<&SegmentationSample> = samples.iter().collect();
    let mode = InputMode::for_channels(ckpt.model.spec.input_channels)?;
    let (x, _) = make_batch::<f32>(&refs, &norm, mode)?;
    let drift = cumulative_fusion_drift(&ckpt.model, &x)?;

    let mut csv = String::from("layer,kind,cumulative_max_abs_logit_drift\n");
    println!("layer  kind       cumulative max |logit drift|");
    for (i, (d, layer)) in drift.iter().zip(&ckpt.model.layers).enumerate() {
        let kind = format!("{:?}", layer.kind()).to_lowercase();
        csv.push_str(&format!("{i},{kind},{d:e}\n"));
        println!("{i:>5}  {kind:<9}  {d:.3e}");
    }
    write_file(&dir, "drift.csv", csv)?;
    let fused = Checkpoint { model: ckpt.model.fused()?, optimizer: None, seed: ckpt.seed };
    save_checkpoint(&fused, &dir.join("checkpoint.sckp"))?;
    let total = drift.last().copied().unwrap_or(0.0);
    if total.is_nan() || total > a.tol {
        return Err(CliError::Numeric(format!("logit drift {total:e} exceeds {:e}", a.tol)));
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchEcho {
    dims: [usize; 4],
    kernel: usize,
    cout: usize,
    runs: usize,
    warmup: usize,
    seed: u64,
}

fn bench(a: BenchArgs) -> CliResult<()> {
    let case = BenchCase { dims: a.dims, kernel: a.kernel, c_out: a.cout };
    case.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = create_run_dir(&a.out, a.seed)?;
    let echo = BenchEcho { dims: a.dims, kernel: a.kernel, cout: a.cout, runs: a.runs, warmup: a.warmup, seed: a.seed };
    write_json(&dir, "config.json", &echo)?;
    let entries = compare(case, a.runs, a.warmup, a.seed)?;
    append_csv(&dir.join("bench.csv"), &entries)?;
    println!("{:<18} {:>12} {:>10} {:>14} {:>10}", "kind", "median_us", "iqr_us", "flops", "params");
    for e in &entries {
        println!("{:<18} {:>12.1} {:>10.1} {:>14} {:>10}", e.kind.label(), e.median_us, e.iqr_us, e.flops, e.params);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let cfg = GradCheckConfig { seed: a.seed, eps: a.eps, tol: a.tol, ..GradCheckConfig::default() };
    if !(cfg.eps > 0.0 && cfg.tol > 0.0) {
        return Err(CliError::Usage("eps and tol must be positive".into()));
    }
    let dir = a.out.as_deref().map(|out| create_run_dir(out, a.seed)).transpose()?;
    if let Some(dir) = &dir {
        write_json(dir, "config.json", &cfg)?;
    }
    let report = run_gradcheck(&cfg)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = &dir {
        write_file(dir, "gradcheck.txt", &table)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Numeric("gradient check failed".into()))
    }
}

#[derive(Serialize)]
struct SelftestEcho {
    seed: u64,
}

fn selftest(a: SelftestArgs) -> CliResult<()> {
    let dir = a.out.as_deref().map(|out| create_run_dir(out, a.seed)).transpose()?;
    if let Some(dir) = &dir {
        write_json(dir, "config.json", &SelftestEcho { seed: a.seed })?;
    }
    let report = run_selftest(a.seed)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = &dir {
        write_file(dir, "selftest.txt", &table)?;
    }
    if report.passed() {
        println!("selftest passed");
        Ok(())
    } else {
        Err(CliError::Numeric("selftest failed".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_never_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_run_dir(tmp.path(), 3).unwrap();
        let b = create_run_dir(tmp.path(), 3).unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
        assert!(a.file_name().unwrap().to_str().unwrap().contains("-seed3"));
    }

    #[test]
    fn core_errors_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::Config("x".into())).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::from(Error::NonFinite("loss")).exit_code(), EXIT_NUMERIC);
        assert_eq!(CliError::from(Error::Dataset("x".into())).exit_code(), EXIT_DATA);
        assert_eq!(CliError::from(Error::CorruptCheckpoint("x".into())).exit_code(), EXIT_DATA);
    }
}
