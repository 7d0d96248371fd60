//! A small encoder-decoder segmentation network whose spatial convolutions
//! are either vanilla or shape-aware.
//!
//! Topology (width `w`, input `C x H x W`, `H` and `W` divisible by 4):
//!
//! ```text
//! l0  3x3 C  -> w    s1  relu            h1  (H)
//! l1  3x3 w  -> 2w   s2  relu            h2  (H/2)
//! l2  3x3 2w -> 2w   s1  relu            h3  (H/2)
//! l3  3x3 2w -> 4w   s2  relu            h4  (H/4)
//! l4  3x3 4w -> 2w   s1  relu, up x2, + h3   -> s5 (H/2)
//! l5  3x3 2w -> w    s1  relu, up x2, + h1   -> s6 (H)
//! l6  3x3 w  -> classes                  logits (H)
//! ```
//!
//! Upsampling is nearest-neighbour; there are no normalization layers.

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, conv2d_backward, ConvConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::shapeconv::{assemble_kbs, he_normal_kernel, shapeconv_backward, shapeconv_forward, ShapeConvParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    #[serde(rename = "vanilla", alias = "conv")]
    Conv,
    ShapeConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Encoder,
    Decoder,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub cfg: ConvConfig,
    pub activation: Activation,
    pub role: LayerRole,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub num_classes: usize,
    pub width: usize,
    pub layers: Vec<LayerSpec>,
}

const LAYERS: usize = 7;

impl ModelSpec {
    /// The default topology. Every convolution with a spatial extent of at
    /// least 2 gets `kind`; 1x1 layers would stay vanilla.
    pub fn toy(input_channels: usize, num_classes: usize, width: usize, kind: LayerKind) -> Self {
        use Activation::*;
        use LayerRole::*;
        let w = width;
        let plan = [
            (input_channels, w, 1, Relu, Encoder),
            (w, 2 * w, 2, Relu, Encoder),
            (2 * w, 2 * w, 1, Relu, Encoder),
            (2 * w, 4 * w, 2, Relu, Encoder),
            (4 * w, 2 * w, 1, Relu, Decoder),
            (2 * w, w, 1, Relu, Decoder),
            (w, num_classes, 1, None, Head),
        ];
        let layers = plan
            .iter()
            .map(|&(c_in, c_out, stride, activation, role)| {
                let cfg = ConvConfig::same(3, c_in, c_out).with_stride(stride);
                LayerSpec { kind: replaced_kind(&cfg, kind), cfg, activation, role }
            })
            .collect();
        ModelSpec { input_channels, num_classes, width, layers }
    }

    /// Same topology with every eligible layer switched to `kind`.
    pub fn with_kind(&self, kind: LayerKind) -> Self {
        let mut spec = self.clone();
        for layer in &mut spec.layers {
            layer.kind = replaced_kind(&layer.cfg, kind);
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width;
        if self.layers.len() != LAYERS {
            return Err(Error::Model(format!("expected {LAYERS} layers, got {}", self.layers.len())));
        }
        if w == 0 || self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::Model("width, classes and input channels must be positive".into()));
        }
        let expected = [
            (self.input_channels, w, 1),
            (w, 2 * w, 2),
            (2 * w, 2 * w, 1),
            (2 * w, 4 * w, 2),
            (4 * w, 2 * w, 1),
            (2 * w, w, 1),
            (w, self.num_classes, 1),
        ];
        for (i, (layer, &(c_in, c_out, stride))) in self.layers.iter().zip(&expected).enumerate() {
            let cfg = &layer.cfg;
            cfg.validate()?;
            if cfg.c_in != c_in || cfg.c_out != c_out {
                return Err(Error::Model(format!(
                    "layer {i}: channels {}->{}, expected {c_in}->{c_out}",
                    cfg.c_in, cfg.c_out
                )));
            }
            if cfg.stride_h != stride || cfg.stride_w != stride {
                return Err(Error::Model(format!("layer {i}: stride must be {stride}")));
            }
            if cfg.kernel_h % 2 == 0 || cfg.kernel_w % 2 == 0 {
                return Err(Error::Model(format!("layer {i}: kernel extents must be odd")));
            }
            if cfg.pad_h != cfg.kernel_h / 2 || cfg.pad_w != cfg.kernel_w / 2 {
                return Err(Error::Model(format!("layer {i}: padding must preserve size")));
            }
        }
        let head = &self.layers[LAYERS - 1];
        if head.activation != Activation::None || head.role != LayerRole::Head {
            return Err(Error::Model("the head layer has no activation".into()));
        }
        Ok(())
    }

    pub fn shapeconv_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::ShapeConv).count()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let extra = match l.kind {
                    LayerKind::Conv => 0,
                    LayerKind::ShapeConv => 1 + l.cfg.taps() * l.cfg.taps() * l.cfg.c_in,
                };
                l.cfg.param_count() + extra
            })
            .sum()
    }
}

fn replaced_kind(cfg: &ConvConfig, kind: LayerKind) -> LayerKind {
    if cfg.taps() >= 2 {
        kind
    } else {
        LayerKind::Conv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv { kernel: Tensor<T>, bias: Option<Tensor<T>>, cfg: ConvConfig },
    Shape(ShapeConvParams<T>),
}

#[derive(Clone, Debug)]
struct LayerGrads<T> {
    input: Tensor<T>,
    kernel: Tensor<T>,
    bias: Option<Tensor<T>>,
    base_weight: Option<T>,
    shape_weight: Option<Tensor<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn cfg(&self) -> &ConvConfig {
        match self {
            Layer::Conv { cfg, .. } => cfg,
            Layer::Shape(p) => &p.cfg,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv { .. } => LayerKind::Conv,
            Layer::Shape(_) => LayerKind::ShapeConv,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv { kernel, bias, cfg } => conv2d(x, kernel, bias.as_ref(), cfg),
            Layer::Shape(p) => shapeconv_forward(x, p),
        }
    }

    fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LayerGrads<T>> {
        match self {
            Layer::Conv { kernel, cfg, .. } => {
                let g = conv2d_backward(x, kernel, cfg, grad_out)?;
                Ok(LayerGrads {
                    input: g.grad_input,
                    kernel: g.grad_kernel,
                    bias: g.grad_bias,
                    base_weight: None,
                    shape_weight: None,
                })
            }
            Layer::Shape(p) => {
                let g = shapeconv_backward(x, p, grad_out)?;
                Ok(LayerGrads {
                    input: g.grad_input,
                    kernel: g.grad_kernel,
                    bias: g.grad_bias,
                    base_weight: Some(g.grad_base_weight),
                    shape_weight: Some(g.grad_shape_weight),
                })
            }
        }
    }

    /// Equivalent vanilla layer.
    pub fn fused(&self) -> Result<Layer<T>> {
        match self {
            Layer::Conv { .. } => Ok(self.clone()),
            Layer::Shape(p) => Ok(Layer::Conv { kernel: assemble_kbs(p)?, bias: p.bias.clone(), cfg: p.cfg }),
        }
    }
}

/// Named tensors in canonical parameter order.
pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

pub fn find<'a, T>(set: &'a NamedTensors<T>, name: &str) -> Option<&'a Tensor<T>> {
    set.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<T>>,
    /// Set once every shape-aware layer has been folded into a vanilla one.
    pub fused: bool,
}

/// Activations kept by [`Model::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    /// Input to each layer, in layer order.
    inputs: Vec<Tensor<T>>,
    /// Post-activation output of each hidden layer (relu masks).
    outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// On/off state of every hidden ReLU unit. Two forwards with different
    /// patterns lie on different linear pieces of the network.
    pub fn active_units(&self) -> Vec<bool> {
        self.outputs.iter().flat_map(|t| t.data().iter().map(|&v| v > T::zero())).collect()
    }
}

fn relu<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    let mut t = t;
    for v in t.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    t
}

fn relu_backward<T: Scalar>(grad: &mut Tensor<T>, output: &Tensor<T>) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let &[n, c, h, w] = x.shape() else { unreachable!("rank-4 activation") };
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let (src, dst) = (x.data(), out.data_mut());
    for plane in 0..n * c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[(plane * 2 * h + i) * 2 * w + j] = src[(plane * h + i / 2) * w + j / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
fn upsample2_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let &[n, c, h2, w2] = g.shape() else { unreachable!("rank-4 gradient") };
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let (src, dst) = (g.data(), out.data_mut());
    for plane in 0..n * c {
        for i in 0..h2 {
            for j in 0..w2 {
                dst[(plane * h + i / 2) * w + j / 2] += src[(plane * h2 + i) * w2 + j];
            }
        }
    }
    out
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

/// Builds a model whose kernels depend only on `seed` and layer geometry, so
/// vanilla and shape-aware twins start from identical weights.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let layers = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut rng = Rng::derive(seed, i as u64);
            let kernel = he_normal_kernel(&l.cfg, &mut rng);
            let bias = l.cfg.has_bias.then(|| Tensor::zeros(&[l.cfg.c_out]));
            Ok(match l.kind {
                LayerKind::Conv => Layer::Conv { kernel, bias, cfg: l.cfg },
                LayerKind::ShapeConv => Layer::Shape(ShapeConvParams::from_kernel(kernel, bias, l.cfg)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model { spec: spec.clone(), layers, fused: false })
}

impl<T: Scalar> Model<T> {
    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let &[_, c, h, w] = x.shape() else {
            return Err(Error::Shape(format!("expected N x C x H x W batch, got {:?}", x.shape())));
        };
        if c != self.spec.input_channels {
            return Err(Error::Shape(format!("batch has {c} channels, model expects {}", self.spec.input_channels)));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("spatial size {h}x{w} must be a positive multiple of 4")));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let l = &self.layers;
        let h1 = relu(l[0].forward(x)?);
        let h2 = relu(l[1].forward(&h1)?);
        let h3 = relu(l[2].forward(&h2)?);
        let h4 = relu(l[3].forward(&h3)?);
        let h5 = relu(l[4].forward(&h4)?);
        let mut s5 = upsample2(&h5);
        add_into(&mut s5, &h3);
        let h6 = relu(l[5].forward(&s5)?);
        let mut s6 = upsample2(&h6);
        add_into(&mut s6, &h1);
        let logits = l[6].forward(&s6)?;
        #[cfg(feature = "check-finite")]
        logits.ensure_finite("model forward")?;
        let cache = ForwardCache {
            inputs: vec![x.clone(), h1.clone(), h2.clone(), h3.clone(), h4.clone(), s5, s6],
            outputs: vec![h1, h2, h3, h4, h5, h6],
        };
        Ok((logits, cache))
    }

    /// Gradients of every trainable tensor, in [`Model::named_params`] order.
    pub fn backward_cached(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<NamedTensors<T>> {
        let l = &self.layers;
        let mut grads: Vec<Option<LayerGrads<T>>> = vec![None; LAYERS];
        let inp = &cache.inputs;
        let out = &cache.outputs;

        let g6 = l[6].backward(&inp[6], grad_logits)?;
        let g_s6 = g6.input.clone();
        grads[6] = Some(g6);

        let mut g_h6 = upsample2_backward(&g_s6);
        relu_backward(&mut g_h6, &out[5]);
        let g5 = l[5].backward(&inp[5], &g_h6)?;
        let g_s5 = g5.input.clone();
        grads[5] = Some(g5);

        let mut g_h5 = upsample2_backward(&g_s5);
        relu_backward(&mut g_h5, &out[4]);
        let g4 = l[4].backward(&inp[4], &g_h5)?;
        let mut g_h4 = g4.input.clone();
        grads[4] = Some(g4);

        relu_backward(&mut g_h4, &out[3]);
        let g3 = l[3].backward(&inp[3], &g_h4)?;
        let mut g_h3 = g3.input.clone();
        grads[3] = Some(g3);
        add_into(&mut g_h3, &g_s5);

        relu_backward(&mut g_h3, &out[2]);
        let g2 = l[2].backward(&inp[2], &g_h3)?;
        let mut g_h2 = g2.input.clone();
        grads[2] = Some(g2);

        relu_backward(&mut g_h2, &out[1]);
        let g1 = l[1].backward(&inp[1], &g_h2)?;
        let mut g_h1 = g1.input.clone();
        grads[1] = Some(g1);
        add_into(&mut g_h1, &g_s6);

        relu_backward(&mut g_h1, &out[0]);
        grads[0] = Some(l[0].backward(&inp[0], &g_h1)?);

        let mut named = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            let g = g.expect("every layer visited");
            named.push((format!("l{i}.kernel"), g.kernel));
            if let Some(b) = g.bias {
                named.push((format!("l{i}.bias"), b));
            }
            if let Some(wb) = g.base_weight {
                named.push((format!("l{i}.base_weight"), Tensor::scalar(wb)));
            }
            if let Some(ws) = g.shape_weight {
                named.push((format!("l{i}.shape_weight"), ws));
            }
        }
        Ok(named)
    }

    pub fn backward(&self, batch: &Tensor<T>, grad_logits: &Tensor<T>) -> Result<NamedTensors<T>> {
        let (logits, cache) = self.forward_cached(batch)?;
        grad_logits.expect_shape(logits.shape(), "grad_logits")?;
        self.backward_cached(&cache, grad_logits)
    }

    pub fn named_params(&self) -> NamedTensors<T> {
        let mut named = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { kernel, bias, .. } => {
                    named.push((format!("l{i}.kernel"), kernel.clone()));
                    if let Some(b) = bias {
                        named.push((format!("l{i}.bias"), b.clone()));
                    }
                }
                Layer::Shape(p) => {
                    named.push((format!("l{i}.kernel"), p.kernel.clone()));
                    if let Some(b) = &p.bias {
                        named.push((format!("l{i}.bias"), b.clone()));
                    }
                    named.push((format!("l{i}.base_weight"), Tensor::scalar(p.base_weight)));
                    named.push((format!("l{i}.shape_weight"), p.shape_weight.clone()));
                }
            }
        }
        named
    }

    /// Calls `f` with every trainable buffer, in [`Model::named_params`] order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut [T])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv { kernel, bias, .. } => {
                    f(&format!("l{i}.kernel"), kernel.data_mut());
                    if let Some(b) = bias {
                        f(&format!("l{i}.bias"), b.data_mut());
                    }
                }
                Layer::Shape(p) => {
                    f(&format!("l{i}.kernel"), p.kernel.data_mut());
                    if let Some(b) = &mut p.bias {
                        f(&format!("l{i}.bias"), b.data_mut());
                    }
                    f(&format!("l{i}.base_weight"), std::slice::from_mut(&mut p.base_weight));
                    f(&format!("l{i}.shape_weight"), p.shape_weight.data_mut());
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Folds every shape-aware layer into its reweighted kernel.
    pub fn fused(&self) -> Result<Model<T>> {
        let layers = self.layers.iter().map(Layer::fused).collect::<Result<Vec<_>>>()?;
        Ok(Model { spec: self.spec.with_kind(LayerKind::Conv), layers, fused: true })
    }

    /// Rebuilds a model from its spec and a full set of named parameters.
    pub fn from_params(spec: &ModelSpec, params: &NamedTensors<T>, fused: bool) -> Result<Model<T>> {
        spec.validate()?;
        let take = |name: String, shape: &[usize]| -> Result<Tensor<T>> {
            let t = find(params, &name).ok_or_else(|| Error::Model(format!("missing parameter {name}")))?;
            t.expect_shape(shape, &name)?;
            Ok(t.clone())
        };
        let mut layers = Vec::with_capacity(LAYERS);
        for (i, l) in spec.layers.iter().enumerate() {
            let cfg = l.cfg;
            let kernel = take(format!("l{i}.kernel"), &cfg.kernel_shape())?;
            let bias = if cfg.has_bias { Some(take(format!("l{i}.bias"), &[cfg.c_out])?) } else { None };
            layers.push(match l.kind {
                LayerKind::Conv => Layer::Conv { kernel, bias, cfg },
                LayerKind::ShapeConv => {
                    let n = cfg.taps();
                    let base = take(format!("l{i}.base_weight"), &[])?;
                    let p = ShapeConvParams {
                        kernel,
                        base_weight: base.data()[0],
                        shape_weight: take(format!("l{i}.shape_weight"), &[n, n, cfg.c_in])?,
                        bias,
                        cfg,
                    };
                    p.validate()?;
                    Layer::Shape(p)
                }
            });
        }
        let expected = spec.param_count();
        let model = Model { spec: spec.clone(), layers, fused };
        if params.len() != model.named_params().len() || model.param_count() != expected {
            return Err(Error::Model("parameter set does not match the model layout".into()));
        }
        Ok(model)
    }
}
