//! Segmentation metrics: the four FCN scores from a confusion matrix, and
//! boundary-band (trimap) error curves.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[i * k + j]` is the number of pixels of true class `i` predicted
/// as class `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { num_classes: k, counts: rows.concat() })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one labelled image (or any flat run of pixels). Pixels whose
    /// truth equals `ignore` are skipped.
    pub fn accumulate(&mut self, predicted: &[u8], truth: &[u8], ignore: u8) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
        }
        let k = self.num_classes;
        for (&p, &t) in predicted.iter().zip(truth) {
            if t == ignore {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::Shape(format!("class id {} out of range for {k} classes", p.max(t))));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape("cannot merge confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcnMetrics {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iou: f64,
    pub fw_iou: f64,
    /// `None` for classes absent from the ground truth.
    pub class_iou: Vec<Option<f64>>,
}

impl FcnMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, v) in [
            ("pixel_acc", self.pixel_acc),
            ("mean_acc", self.mean_acc),
            ("mean_iou", self.mean_iou),
            ("fw_iou", self.fw_iou),
        ] {
            writeln!(s, "{name},{v}").expect("write to String");
        }
        for (k, v) in self.class_iou.iter().enumerate() {
            match v {
                Some(v) => writeln!(s, "iou_{k},{v}"),
                None => writeln!(s, "iou_{k},"),
            }
            .expect("write to String");
        }
        s
    }
}

/// Pixel accuracy, mean accuracy, mean IoU and frequency-weighted IoU.
/// Classes with no ground-truth pixels are left out of both means.
pub fn fcn_metrics(cm: &ConfusionMatrix) -> Result<FcnMetrics> {
    let k = cm.num_classes;
    let total = cm.total();
    if total == 0 {
        return Err(Error::Shape("confusion matrix has no counted pixels".into()));
    }
    let mut correct = 0u64;
    let mut acc_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut fw_sum = 0.0;
    let mut present = 0usize;
    let mut class_iou = Vec::with_capacity(k);
    for i in 0..k {
        let nii = cm.get(i, i);
        let ti: u64 = (0..k).map(|j| cm.get(i, j)).sum();
        let col: u64 = (0..k).map(|j| cm.get(j, i)).sum();
        correct += nii;
        if ti == 0 {
            class_iou.push(None);
            continue;
        }
        let iou = nii as f64 / (ti + col - nii) as f64;
        present += 1;
        acc_sum += nii as f64 / ti as f64;
        iou_sum += iou;
        fw_sum += ti as f64 * iou;
        class_iou.push(Some(iou));
    }
    Ok(FcnMetrics {
        pixel_acc: correct as f64 / total as f64,
        mean_acc: acc_sum / present as f64,
        mean_iou: iou_sum / present as f64,
        fw_iou: fw_sum / total as f64,
        class_iou,
    })
}

/// Misclassified fraction inside boundary bands of increasing width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimapCurve {
    pub widths: Vec<usize>,
    pub fractions: Vec<f64>,
}

impl TrimapCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("width,fraction\n");
        for (w, f) in self.widths.iter().zip(&self.fractions) {
            writeln!(s, "{w},{f}").expect("write to String");
        }
        s
    }

    pub fn at(&self, width: usize) -> Option<f64> {
        self.widths.iter().position(|&w| w == width).map(|i| self.fractions[i])
    }
}

/// Chebyshev distance of every pixel to the nearest ground-truth boundary
/// pixel, or `None` when the image has no boundary.
///
/// A boundary pixel is a labelled pixel with a 4-neighbour carrying a
/// different (non-ignored) label.
pub fn boundary_distance(truth: &[u8], h: usize, w: usize, ignore: u8) -> Vec<Option<usize>> {
    let mut dist = vec![None; h * w];
    let mut queue = VecDeque::new();
    for i in 0..h {
        for j in 0..w {
            let t = truth[i * w + j];
            if t == ignore {
                continue;
            }
            let differs = |ii: usize, jj: usize| {
                let u = truth[ii * w + jj];
                u != ignore && u != t
            };
            let edge = (i > 0 && differs(i - 1, j))
                || (i + 1 < h && differs(i + 1, j))
                || (j > 0 && differs(i, j - 1))
                || (j + 1 < w && differs(i, j + 1));
            if edge {
                dist[i * w + j] = Some(0);
                queue.push_back((i, j));
            }
        }
    }
    // Multi-source BFS over 8-neighbours yields exact Chebyshev distances.
    while let Some((i, j)) = queue.pop_front() {
        let d = dist[i * w + j].expect("queued pixels have a distance") + 1;
        for ii in i.saturating_sub(1)..(i + 2).min(h) {
            for jj in j.saturating_sub(1)..(j + 2).min(w) {
                if dist[ii * w + jj].is_none() {
                    dist[ii * w + jj] = Some(d);
                    queue.push_back((ii, jj));
                }
            }
        }
    }
    dist
}

/// Running error/pixel counts per band width, accumulated over images.
///
/// The band of width `w` holds the pixels whose Chebyshev distance to the
/// boundary is less than `w`, so width 1 is the boundary itself.
#[derive(Clone, Debug, PartialEq)]
pub struct TrimapAccumulator {
    widths: Vec<usize>,
    errors: Vec<u64>,
    pixels: Vec<u64>,
    ignore: u8,
}

impl TrimapAccumulator {
    pub fn new(widths: &[usize], ignore: u8) -> Result<Self> {
        if widths.contains(&0) || widths.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config("trimap widths must be positive and strictly ascending".into()));
        }
        Ok(TrimapAccumulator {
            widths: widths.to_vec(),
            errors: vec![0; widths.len()],
            pixels: vec![0; widths.len()],
            ignore,
        })
    }

    pub fn add_image(&mut self, predicted: &[u8], truth: &[u8], h: usize, w: usize) -> Result<()> {
        if predicted.len() != h * w || truth.len() != h * w {
            return Err(Error::Shape(format!("trimap image expects {} pixels", h * w)));
        }
        let dist = boundary_distance(truth, h, w, self.ignore);
        for ((&p, &t), d) in predicted.iter().zip(truth).zip(&dist) {
            let Some(d) = *d else { continue };
            if t == self.ignore {
                continue;
            }
            for (k, &width) in self.widths.iter().enumerate() {
                if d < width {
                    self.pixels[k] += 1;
                    self.errors[k] += u64::from(p != t);
                }
            }
        }
        Ok(())
    }

    /// Fractions per width; an empty band scores 0.
    pub fn curve(&self) -> TrimapCurve {
        let fractions = self
            .errors
            .iter()
            .zip(&self.pixels)
            .map(|(&e, &n)| if n == 0 { 0.0 } else { e as f64 / n as f64 })
            .collect();
        TrimapCurve { widths: self.widths.clone(), fractions }
    }
}

/// Trimap curve of a single `h x w` image.
pub fn trimap_curve(
    predicted: &[u8],
    truth: &[u8],
    h: usize,
    w: usize,
    widths: &[usize],
    ignore: u8,
) -> Result<TrimapCurve> {
    let mut acc = TrimapAccumulator::new(widths, ignore)?;
    acc.add_image(predicted, truth, h, w)?;
    Ok(acc.curve())
}
