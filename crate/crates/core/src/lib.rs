//! Shape-aware convolution: a kernel split into its per-channel mean (base)
//! and residual (shape), reweighted by a learnable scalar `W_B` and matrix
//! `W_S`, and folded back into one vanilla kernel for inference.
//!
//! Around the layer sit a small im2col convolution engine with hand-derived
//! gradients, a synthetic RGB-D segmentation dataset, an encoder-decoder
//! toy network, FCN metrics with trimap boundary curves, a checkpoint format
//! and the numerical checks that back every claim about the layer.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod im2col;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod shapeconv;
pub mod tensor;
pub mod train;
pub mod verify;

pub use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use crate::conv::{conv2d, conv2d_backward, ConvConfig};
pub use crate::data::{Dataset, DatasetConfig, Normalization, SegmentationSample};
pub use crate::error::{Error, Result};
pub use crate::metrics::{fcn_metrics, ConfusionMatrix, FcnMetrics, TrimapCurve};
pub use crate::net::{build_model, LayerKind, Model, ModelSpec};
pub use crate::rng::Rng;
pub use crate::shapeconv::{assemble_kbs, fuse, shapeconv_forward, ShapeConvParams};
pub use crate::tensor::{DType, Scalar, Tensor};
pub use crate::train::{evaluate, train, EvalReport, TrainConfig, TrainLog};
