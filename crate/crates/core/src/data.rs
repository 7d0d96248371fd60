//! Synthetic RGB-D scenes and the on-disk dataset format.
//!
//! Scenes are built so that an object's class is carried by the *shape* of
//! its depth profile (flat, slanted, curved) while its colour is drawn
//! independently of the class. Every sample also carries a global depth
//! offset; train and test splits draw that offset from disjoint ranges, so a
//! model that keys on absolute depth generalizes poorly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_tensor_file, encode_tensor_file, StoredTensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const IGNORE_LABEL: u8 = 255;
pub const CLASS_NAMES: [&str; 6] = ["floor", "wall", "box", "wedge", "ridge", "dome"];
pub const FLOOR: u8 = 0;
pub const WALL: u8 = 1;
pub const BOX: u8 = 2;
pub const WEDGE: u8 = 3;
pub const RIDGE: u8 = 4;
pub const DOME: u8 = 5;

const INDEX_FILE: &str = "index.json";
const INDEX_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    /// `3 x H x W`, values in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `1 x H x W`, metres.
    pub depth: Tensor<f32>,
    /// `H x W` class ids, [`IGNORE_LABEL`] for unlabelled pixels.
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl SegmentationSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (h, w) = (self.height, self.width);
        self.rgb.expect_shape(&[3, h, w], "rgb raster").map_err(dataset_err)?;
        self.depth.expect_shape(&[1, h, w], "depth raster").map_err(dataset_err)?;
        if self.labels.len() != h * w {
            return Err(Error::Dataset(format!("{} labels for a {h}x{w} raster", self.labels.len())));
        }
        for (&l, &d) in self.labels.iter().zip(self.depth.data()) {
            if l != IGNORE_LABEL && (l as usize >= num_classes || d.is_nan() || d <= 0.0) {
                return Err(Error::Dataset(format!("bad labelled pixel: class {l}, depth {d}")));
            }
        }
        Ok(())
    }
}

fn dataset_err(e: Error) -> Error {
    Error::Dataset(e.to_string())
}

/// Where an object sits in the raster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Footprint {
    Rect,
    Ellipse,
}

/// One object, rendered as `d0 + slant_x u + slant_y v - curvature bump(u, v)`
/// over normalized footprint coordinates `u, v` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecipe {
    pub class: u8,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub footprint: Footprint,
    pub base_distance: f64,
    pub slant_x: f64,
    pub slant_y: f64,
    /// Height of a cylindrical bump across `u` (ridge) or a spherical cap
    /// (ellipse footprints).
    pub curvature: f64,
    pub color: [f64; 3],
    /// Per-pixel colour noise level.
    pub texture: f64,
}

/// Everything that determines a scene except pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub height: usize,
    pub width: usize,
    /// Floor depth at the top and bottom rows; the floor is a plane.
    pub floor_far: f64,
    pub floor_near: f64,
    pub floor_color: [f64; 3],
    /// Added to every depth value after rendering.
    pub depth_offset: f64,
    /// Brightness ramp: multiplier `1 + gx x' + gy y'` with `x', y'` in `[-1, 1]`.
    pub light_gradient: [f64; 2],
    pub depth_noise: f64,
    /// Objects in painting order; later ones occlude earlier ones.
    pub objects: Vec<ObjectRecipe>,
}

impl SceneRecipe {
    pub fn empty(height: usize, width: usize) -> Self {
        SceneRecipe {
            height,
            width,
            floor_far: 4.0,
            floor_near: 1.0,
            floor_color: [0.55, 0.45, 0.35],
            depth_offset: 0.0,
            light_gradient: [0.0, 0.0],
            depth_noise: 0.0,
            objects: Vec::new(),
        }
    }
}

fn coord(i: usize, start: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        2.0 * (i - start) as f64 / (extent - 1) as f64 - 1.0
    }
}

/// Renders a recipe. Pixel noise is the only use of `seed`.
pub fn generate_scene(recipe: &SceneRecipe, seed: u64) -> Result<SegmentationSample> {
    let (h, w) = (recipe.height, recipe.width);
    if h == 0 || w == 0 {
        return Err(Error::Dataset("scene must have a positive size".into()));
    }
    let mut depth = vec![0.0f64; h * w];
    let mut labels = vec![FLOOR; h * w];
    let mut color = vec![recipe.floor_color; h * w];
    let mut texture = vec![0.03f64; h * w];
    for i in 0..h {
        let t = if h > 1 { i as f64 / (h - 1) as f64 } else { 1.0 };
        depth[i * w..(i + 1) * w].fill(recipe.floor_far + (recipe.floor_near - recipe.floor_far) * t);
    }
    for obj in &recipe.objects {
        if obj.class as usize >= CLASS_NAMES.len() {
            return Err(Error::Dataset(format!("unknown object class {}", obj.class)));
        }
        for i in obj.top..(obj.top + obj.height).min(h) {
            let v = coord(i, obj.top, obj.height);
            for j in obj.left..(obj.left + obj.width).min(w) {
                let u = coord(j, obj.left, obj.width);
                let bump = match obj.footprint {
                    Footprint::Rect => (1.0 - u * u).max(0.0).sqrt(),
                    Footprint::Ellipse => {
                        let r2 = u * u + v * v;
                        if r2 > 1.0 {
                            continue;
                        }
                        (1.0 - r2).sqrt()
                    }
                };
                let k = i * w + j;
                depth[k] = obj.base_distance + obj.slant_x * u + obj.slant_y * v - obj.curvature * bump;
                labels[k] = obj.class;
                color[k] = obj.color;
                texture[k] = obj.texture;
            }
        }
    }
    let mut rng = Rng::new(seed);
    let mut rgb = vec![0.0f32; 3 * h * w];
    let mut depth_out = vec![0.0f32; h * w];
    let offset = recipe.depth_offset as f32;
    for i in 0..h {
        let y = coord(i, 0, h);
        for j in 0..w {
            let x = coord(j, 0, w);
            let k = i * w + j;
            let light = 1.0 + recipe.light_gradient[0] * x + recipe.light_gradient[1] * y;
            for (c, base) in color[k].iter().enumerate() {
                let v = base * light + texture[k] * rng.normal();
                rgb[c * h * w + k] = v.clamp(0.0, 1.0) as f32;
            }
            let noisy = depth[k] + recipe.depth_noise * rng.normal();
            // The offset is applied last and in f32, so shifting a scene by
            // a constant shifts its depth raster by exactly that constant.
            depth_out[k] = (noisy as f32) + offset;
        }
    }
    Ok(SegmentationSample {
        rgb: Tensor::new(&[3, h, w], rgb)?,
        depth: Tensor::new(&[1, h, w], depth_out)?,
        labels,
        height: h,
        width: w,
    })
}

/// Draws a scene: a back wall above a random horizon and one object of each
/// non-background class, in random painting order.
pub fn random_recipe(rng: &mut Rng, height: usize, width: usize, depth_offset: f64) -> SceneRecipe {
    let (hf, wf) = (height as f64, width as f64);
    let mut recipe = SceneRecipe::empty(height, width);
    recipe.depth_offset = depth_offset;
    recipe.floor_far = rng.range(3.4, 4.2);
    recipe.floor_near = rng.range(0.8, 1.2);
    recipe.floor_color = [rng.range(0.45, 0.6), rng.range(0.35, 0.5), rng.range(0.25, 0.4)];
    recipe.light_gradient = [rng.range(-0.15, 0.15), rng.range(-0.15, 0.15)];
    recipe.depth_noise = 0.005;
    let horizon = ((hf * rng.range(0.25, 0.4)) as usize).max(1);
    let wall_distance = recipe.floor_far + rng.range(0.0, 0.3);
    let grey = rng.range(0.7, 0.85);
    recipe.objects.push(ObjectRecipe {
        class: WALL,
        top: 0,
        left: 0,
        height: horizon,
        width,
        footprint: Footprint::Rect,
        base_distance: wall_distance,
        slant_x: rng.range(-0.3, 0.3),
        slant_y: 0.0,
        curvature: 0.0,
        color: [grey, grey, grey * rng.range(0.9, 1.0)],
        texture: 0.03,
    });
    let mut classes = [BOX, WEDGE, RIDGE, DOME];
    rng.shuffle(&mut classes);
    for class in classes {
        let oh = ((hf * rng.range(0.22, 0.34)) as usize).max(3);
        let ow = ((wf * rng.range(0.22, 0.34)) as usize).max(3);
        let top = horizon / 2 + rng.below(height.saturating_sub(oh + horizon / 2).max(1));
        let left = rng.below(width.saturating_sub(ow).max(1));
        let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let (footprint, slant_x, slant_y, curvature) = match class {
            BOX => (Footprint::Rect, rng.range(-0.05, 0.05), rng.range(-0.05, 0.05), 0.0),
            WEDGE => (Footprint::Rect, sign * rng.range(0.5, 0.8), rng.range(-0.05, 0.05), 0.0),
            RIDGE => (Footprint::Rect, rng.range(-0.05, 0.05), 0.0, rng.range(0.4, 0.6)),
            _ => (Footprint::Ellipse, 0.0, 0.0, rng.range(0.4, 0.6)),
        };
        recipe.objects.push(ObjectRecipe {
            class,
            top,
            left,
            height: oh,
            width: ow,
            footprint,
            base_distance: rng.range(1.4, 2.6),
            slant_x,
            slant_y,
            curvature,
            color: [rng.range(0.15, 0.85), rng.range(0.15, 0.85), rng.range(0.15, 0.85)],
            texture: 0.04,
        });
    }
    recipe
}

/// `num_samples` scenes with depth offsets drawn uniformly from
/// `shift_range`. Sample `k` depends only on `(seed, k)`.
pub fn generate_split(
    num_samples: usize,
    seed: u64,
    shift_range: (f64, f64),
    height: usize,
    width: usize,
) -> Result<Vec<SegmentationSample>> {
    let (lo, hi) = shift_range;
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(Error::Dataset(format!("invalid depth shift range [{lo}, {hi}]")));
    }
    (0..num_samples)
        .map(|k| {
            let mut rng = Rng::derive(seed, k as u64);
            let shift = rng.range(lo, hi);
            let recipe = random_recipe(&mut rng, height, width, shift);
            generate_scene(&recipe, rng.next_u64())
        })
        .collect()
}

/// Generator settings for a full train/test dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_n: usize,
    pub test_n: usize,
    pub height: usize,
    pub width: usize,
    pub shift_train: (f64, f64),
    pub shift_test: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            train_n: 800,
            test_n: 200,
            height: 64,
            width: 64,
            shift_train: (0.0, 1.0),
            shift_test: (1.5, 2.5),
        }
    }
}

/// Depth standardization constants, computed on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub depth_mean: f64,
    pub depth_std: f64,
}

impl Normalization {
    /// Mean and standard deviation over all labelled depth pixels.
    pub fn from_samples(samples: &[SegmentationSample]) -> Result<Self> {
        let labelled = || {
            samples.iter().flat_map(|s| {
                s.depth.data().iter().zip(&s.labels).filter(|(_, &l)| l != IGNORE_LABEL).map(|(&d, _)| d as f64)
            })
        };
        let n = labelled().count();
        if n == 0 {
            return Err(Error::Dataset("no labelled pixels to normalize over".into()));
        }
        let mean = labelled().sum::<f64>() / n as f64;
        let var = labelled().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        Ok(Normalization { depth_mean: mean, depth_std: if std > 0.0 { std } else { 1.0 } })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    pub train: Vec<SegmentationSample>,
    pub test: Vec<SegmentationSample>,
    /// Present when the dataset came from the built-in generator.
    pub generator: Option<DatasetConfig>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let train =
        generate_split(cfg.train_n, Rng::derive(cfg.seed, 0).next_u64(), cfg.shift_train, cfg.height, cfg.width)?;
    let test = generate_split(cfg.test_n, Rng::derive(cfg.seed, 1).next_u64(), cfg.shift_test, cfg.height, cfg.width)?;
    Ok(Dataset {
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        normalization: Normalization::from_samples(&train)?,
        train,
        test,
        generator: Some(cfg.clone()),
    })
}

/// Schema of `index.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub ignore_label: u8,
    pub normalization: Normalization,
    pub train: Vec<String>,
    pub test: Vec<String>,
    #[serde(default)]
    pub generator: Option<DatasetConfig>,
}

fn sample_bytes(s: &SegmentationSample) -> Vec<u8> {
    encode_tensor_file(&[
        ("rgb".into(), StoredTensor::from_tensor(&s.rgb)),
        ("depth".into(), StoredTensor::from_tensor(&s.depth)),
        ("labels".into(), StoredTensor::from_u8(&[s.height, s.width], s.labels.clone())),
    ])
}

fn parse_sample(bytes: &[u8], num_classes: usize) -> Result<SegmentationSample> {
    let entries = decode_tensor_file(bytes)?;
    let get = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Dataset(format!("sample file lacks tensor {name:?}")))
    };
    let labels = get("labels")?;
    let &[height, width] = labels.shape.as_slice() else {
        return Err(Error::Dataset("labels must be H x W".into()));
    };
    let sample = SegmentationSample {
        rgb: get("rgb")?.to_tensor()?,
        depth: get("depth")?.to_tensor()?,
        labels: labels.as_u8()?.to_vec(),
        height,
        width,
    };
    sample.validate(num_classes)?;
    Ok(sample)
}

/// Writes `index.json` plus one tensor file per sample under `train/` and
/// `test/`. Existing files with the same names are replaced.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let mut index = DatasetIndex {
        format_version: INDEX_VERSION,
        class_names: ds.class_names.clone(),
        ignore_label: IGNORE_LABEL,
        normalization: ds.normalization,
        train: Vec::new(),
        test: Vec::new(),
        generator: ds.generator.clone(),
    };
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        fs::create_dir_all(dir.join(split))?;
        for (k, s) in samples.iter().enumerate() {
            let rel = format!("{split}/{k:06}.sct");
            fs::write(dir.join(&rel), sample_bytes(s))?;
            if split == "train" { &mut index.train } else { &mut index.test }.push(rel);
        }
    }
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if index.format_version != INDEX_VERSION {
        return Err(Error::Dataset(format!("unsupported index version {}", index.format_version)));
    }
    if index.ignore_label != IGNORE_LABEL {
        return Err(Error::Dataset(format!("ignore label must be {IGNORE_LABEL}")));
    }
    let k = index.class_names.len();
    if k == 0 || k > IGNORE_LABEL as usize {
        return Err(Error::Dataset(format!("{k} classes is not supported")));
    }
    let load = |files: &[String]| -> Result<Vec<SegmentationSample>> {
        files
            .iter()
            .map(|rel| {
                let bytes = fs::read(dir.join(rel)).map_err(|e| Error::Dataset(format!("{rel}: {e}")))?;
                parse_sample(&bytes, k).map_err(|e| Error::Dataset(format!("{rel}: {e}")))
            })
            .collect()
    };
    Ok(Dataset {
        class_names: index.class_names,
        normalization: index.normalization,
        train: load(&index.train)?,
        test: load(&index.test)?,
        generator: index.generator,
    })
}

/// Which channels the network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// RGB followed by standardized depth.
    Rgbd,
    Rgb,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Rgbd => 4,
            InputMode::Rgb => 3,
        }
    }

    pub fn for_channels(c: usize) -> Result<Self> {
        match c {
            4 => Ok(InputMode::Rgbd),
            3 => Ok(InputMode::Rgb),
            _ => Err(Error::Model(format!("no input mode has {c} channels"))),
        }
    }
}

/// Stacks samples into an `N x C x H x W` input and a flat label vector.
pub fn make_batch<T: Scalar>(
    samples: &[&SegmentationSample],
    norm: &Normalization,
    mode: InputMode,
) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let c = mode.channels();
    let plane = h * w;
    let mut input = Vec::with_capacity(samples.len() * c * plane);
    let mut labels = Vec::with_capacity(samples.len() * plane);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Dataset("samples in a batch must share a size".into()));
        }
        input.extend(s.rgb.data().iter().map(|&v| T::of(v as f64)));
        if mode == InputMode::Rgbd {
            input.extend(s.depth.data().iter().map(|&d| T::of((d as f64 - norm.depth_mean) / norm.depth_std)));
        }
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::new(&[samples.len(), c, h, w], input)?, labels))
}
