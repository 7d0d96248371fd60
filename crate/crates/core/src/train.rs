//! Deterministic SGD training and evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Dataset, InputMode, Normalization, SegmentationSample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::metrics::{fcn_metrics, ConfusionMatrix, FcnMetrics, TrimapAccumulator, TrimapCurve};
use crate::net::{find, LayerKind, Model, NamedTensors};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub layer_kind: LayerKind,
    pub freeze_base_weight: bool,
    pub freeze_shape_weight: bool,
    pub ignore_label: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            layer_kind: LayerKind::ShapeConv,
            freeze_base_weight: false,
            freeze_shape_weight: false,
            ignore_label: IGNORE_LABEL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.layer_kind == LayerKind::Conv && (self.freeze_base_weight || self.freeze_shape_weight) {
            return Err(Error::Config("freeze flags apply only to shapeconv models".into()));
        }
        Ok(())
    }

    /// Whether the optimizer leaves the named parameter untouched.
    pub fn is_frozen(&self, name: &str) -> bool {
        (self.freeze_base_weight && name.ends_with(".base_weight"))
            || (self.freeze_shape_weight && name.ends_with(".shape_weight"))
    }
}

/// Mean cross-entropy over non-ignored pixels and its gradient with respect
/// to the logits. Returns a zero loss and zero gradient when every pixel is
/// ignored.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8], ignore: u8) -> Result<(f64, Tensor<T>)> {
    let &[n, c, h, w] = logits.shape() else {
        return Err(Error::Shape(format!("expected N x C x H x W logits, got {:?}", logits.shape())));
    };
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::Shape(format!("{} labels for {} pixels", labels.len(), n * plane)));
    }
    let counted = labels.iter().filter(|&&l| l != ignore).count();
    let mut grad = Tensor::zeros(logits.shape());
    if counted == 0 {
        return Ok((0.0, grad));
    }
    let inv = T::of(1.0 / counted as f64);
    let z = logits.data();
    let g = grad.data_mut();
    let mut probs = vec![T::zero(); c];
    let mut loss = 0.0f64;
    for s in 0..n {
        for p in 0..plane {
            let label = labels[s * plane + p];
            if label == ignore {
                continue;
            }
            let y = label as usize;
            if y >= c {
                return Err(Error::Shape(format!("label {y} out of range for {c} classes")));
            }
            let at = |k: usize| s * c * plane + k * plane + p;
            let max = (0..c).map(|k| z[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (k, pk) in probs.iter_mut().enumerate() {
                *pk = (z[at(k)] - max).exp();
                total += *pk;
            }
            loss += (total.ln() - (z[at(y)] - max)).as_f64();
            for (k, &pk) in probs.iter().enumerate() {
                let onehot = if k == y { T::one() } else { T::zero() };
                g[at(k)] = (pk / total - onehot) * inv;
            }
        }
    }
    Ok((loss / counted as f64, grad))
}

/// Momentum buffers, one per trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub velocity: NamedTensors<T>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(model: &Model<T>) -> Self {
        SgdState { velocity: model.named_params().into_iter().map(|(n, t)| (n, Tensor::zeros(t.shape()))).collect() }
    }
}

/// One heavy-ball update: `v <- mu v + g + lambda theta`, `theta <- theta - eta v`.
pub fn sgd_update<T: Scalar>(theta: &mut [T], grad: &[T], velocity: &mut [T], lr: T, momentum: T, decay: T) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + decay * *t;
        *t -= lr * *v;
    }
}

/// Applies [`sgd_update`] to every non-frozen parameter of `model`. Weight
/// decay acts on convolution kernels only.
pub fn sgd_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &NamedTensors<T>,
    state: &mut SgdState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let lr = T::of(cfg.learning_rate);
    let momentum = T::of(cfg.momentum);
    let mut missing = None;
    model.visit_params_mut(|name, theta| {
        if cfg.is_frozen(name) || missing.is_some() {
            return;
        }
        let Some(g) = find(grads, name).filter(|g| g.len() == theta.len()) else {
            missing = Some(name.to_string());
            return;
        };
        let Some((_, v)) = state.velocity.iter_mut().find(|(n, _)| n == name).filter(|(_, v)| v.len() == theta.len())
        else {
            missing = Some(format!("momentum/{name}"));
            return;
        };
        let decay = if name.ends_with(".kernel") { T::of(cfg.weight_decay) } else { T::zero() };
        sgd_update(theta, g.data(), v.data_mut(), lr, momentum, decay);
    });
    match missing {
        Some(name) => Err(Error::Model(format!("no matching gradient or buffer for {name}"))),
        None => Ok(()),
    }
}

/// Per-pixel argmax over classes; ties go to the lowest class id.
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let &[n, c, h, w] = logits.shape() else {
        return Err(Error::Shape(format!("expected N x C x H x W logits, got {:?}", logits.shape())));
    };
    let plane = h * w;
    let z = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for s in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if z[(s * c + k) * plane + p] > z[(s * c + best) * plane + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub metrics: FcnMetrics,
    pub trimap: TrimapCurve,
}

/// Confusion matrix, FCN metrics and trimap curve of `model` over `samples`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[SegmentationSample],
    norm: &Normalization,
    trimap_widths: &[usize],
    batch_size: usize,
) -> Result<EvalReport> {
    let mode = InputMode::for_channels(model.spec.input_channels)?;
    let mut confusion = ConfusionMatrix::new(model.spec.num_classes);
    let mut trimap = TrimapAccumulator::new(trimap_widths, IGNORE_LABEL)?;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegmentationSample> = chunk.iter().collect();
        let (x, labels) = make_batch::<T>(&refs, norm, mode)?;
        let pred = predict(&model.forward(&x)?)?;
        confusion.accumulate(&pred, &labels, IGNORE_LABEL)?;
        if !trimap_widths.is_empty() {
            for (k, s) in chunk.iter().enumerate() {
                let px = s.height * s.width;
                trimap.add_image(&pred[k * px..(k + 1) * px], &s.labels, s.height, s.width)?;
            }
        }
    }
    Ok(EvalReport { metrics: fcn_metrics(&confusion)?, confusion, trimap: trimap.curve() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iou: f64,
    pub fw_iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,pixel_acc,mean_acc,mean_iou,fw_iou\n");
        for r in &self.records {
            writeln!(s, "{},{},{},{},{},{}", r.epoch, r.loss, r.pixel_acc, r.mean_acc, r.mean_iou, r.fw_iou)
                .expect("write to String");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub optimizer: SgdState<T>,
    pub log: TrainLog,
}

pub fn train<T: Scalar>(model: Model<T>, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_with(model, ds, cfg, |_| {})
}

/// [`train`] with a callback after each epoch's evaluation.
pub fn train_with<T: Scalar>(
    mut model: Model<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.spec.with_kind(cfg.layer_kind) != model.spec {
        return Err(Error::Config(format!("model layers do not match layer_kind {:?}", cfg.layer_kind)));
    }
    if ds.train.is_empty() || ds.test.is_empty() {
        return Err(Error::Dataset("training needs non-empty train and test splits".into()));
    }
    if ds.num_classes() != model.spec.num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model predicts {}",
            ds.num_classes(),
            model.spec.num_classes
        )));
    }
    let mode = InputMode::for_channels(model.spec.input_channels)?;
    let mut state = SgdState::new(&model);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        Rng::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&SegmentationSample> = idx.iter().map(|&i| &ds.train[i]).collect();
            let (x, labels) = make_batch::<T>(&refs, &ds.normalization, mode)?;
            let (logits, cache) = model.forward_cached(&x)?;
            let (loss, grad) = cross_entropy_loss(&logits, &labels, cfg.ignore_label)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let grads = model.backward_cached(&cache, &grad)?;
            sgd_step(&mut model, &grads, &mut state, cfg)?;
            loss_sum += loss;
            batches += 1;
        }
        let eval = evaluate(&model, &ds.test, &ds.normalization, &[], cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            pixel_acc: eval.metrics.pixel_acc,
            mean_acc: eval.metrics.mean_acc,
            mean_iou: eval.metrics.mean_iou,
            fw_iou: eval.metrics.fw_iou,
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok(TrainOutcome { model, optimizer: state, log })
}
