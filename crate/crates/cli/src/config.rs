//! The JSON run configuration.
//!
//! Every section and field is optional; missing values take the defaults
//! below. Unknown keys are rejected. The top-level `seed` seeds model
//! initialization, data generation and batch shuffling, and overrides
//! `train.seed` and `data.generator.seed`.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "model": { "input_channels": 4, "num_classes": 6, "width": 16 },
//!   "train": { "epochs": 30, "batch_size": 8, "learning_rate": 0.05, "momentum": 0.9,
//!              "weight_decay": 0.0001, "layer_kind": "shapeconv",
//!              "freeze_base_weight": false, "freeze_shape_weight": false, "ignore_label": 255 },
//!   "data": { "path": null,
//!             "generator": { "train_n": 800, "test_n": 200, "height": 64, "width": 64,
//!                            "shift_train": [0.0, 1.0], "shift_test": [1.5, 2.5] } },
//!   "eval": { "trimap_widths": [1, 2, 3, 4, 6, 8] }
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shapeconv::data::DatasetConfig;
use shapeconv::net::{LayerKind, ModelSpec};
use shapeconv::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_channels: usize,
    pub num_classes: usize,
    pub width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { input_channels: 4, num_classes: 6, width: 16 }
    }
}

impl ModelSection {
    pub fn spec(&self, kind: LayerKind) -> ModelSpec {
        ModelSpec::toy(self.input_channels, self.num_classes, self.width, kind)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// An existing dataset directory; when absent the generator runs.
    pub path: Option<PathBuf>,
    pub generator: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub trimap_widths: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { trimap_widths: vec![1, 2, 3, 4, 6, 8] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Propagates the top-level seed into the sections that carry one.
    pub fn effective(mut self) -> Self {
        self.train.seed = self.seed;
        self.data.generator.seed = self.seed;
        self
    }
}
