//! Knee-joint center detection and its evaluation.
//!
//! Radiographs are downscaled (default 10%) and histogram-equalized, split
//! into left and right halves, and each half is scanned with a 20×20 window.
//! Two scorers are provided: nearest-template Euclidean distance and a linear
//! SVM over horizontal-edge Sobel features. Ground truth lives in original
//! image coordinates; detections carry the scale that links the two.

mod annotations;
mod scan;

pub use annotations::{read_annotations, write_annotations, AnnotationRecord, Side};
pub use scan::{
    build_templates, detect_svm, detect_template_matching, patch_features, sample_detector_patches,
    train_joint_detector, AnnotatedJoint, DetectorSamples, TemplateSet,
};

use std::fmt::Write as _;

use crate::error::{arg, data, Result};
use crate::imaging::{downscale, equalize_hist, extract_patch, BBox, GrayImage};

/// Side of the square detection window, in detection-scale pixels.
pub const WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    /// Downscale factor applied to the original radiograph.
    pub scale: f64,
    /// Equalize after downscaling; applies to both detectors.
    pub equalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            scale: 0.1,
            equalize: true,
        }
    }
}

/// A radiograph at detection scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub image: GrayImage,
    /// Detection-scale pixels per original pixel.
    pub scale: f64,
}

impl Preprocessed {
    /// Wraps an image that is already at its own detection scale.
    pub fn unscaled(image: GrayImage) -> Self {
        Self { image, scale: 1.0 }
    }
}

pub fn preprocess(original: &GrayImage, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let small = downscale(original, cfg.scale)?;
    let image = if cfg.equalize { equalize_hist(&small) } else { small };
    Ok(Preprocessed {
        image,
        scale: cfg.scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanConfig {
    pub stride: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// 20×20 box in detection-scale coordinates of the whole image.
    pub bbox: BBox,
    /// Higher is better: SVM decision value, or negated template distance.
    pub score: f64,
    pub scale: f64,
}

impl Detection {
    /// Box mapped back to original-image coordinates.
    pub fn to_original(&self) -> BBox {
        to_original_box(&self.bbox, self.scale)
    }

    /// Window center in original-image coordinates.
    pub fn original_center(&self) -> (i64, i64) {
        let (cx, cy) = self.bbox.center();
        (
            (cx as f64 / self.scale).round() as i64,
            (cy as f64 / self.scale).round() as i64,
        )
    }
}

pub fn to_original_box(b: &BBox, scale: f64) -> BBox {
    let up = |v: i64| (v as f64 / scale).round() as i64;
    BBox {
        x: up(b.x),
        y: up(b.y),
        w: up(b.w),
        h: up(b.h),
    }
}

/// Detection-scale window centered on the original-coordinate center of `b`.
pub fn to_detection_box(b: &BBox, scale: f64) -> BBox {
    let (cx, cy) = (b.x as f64 + b.w as f64 / 2.0, b.y as f64 + b.h as f64 / 2.0);
    BBox::centered((cx * scale).round() as i64, (cy * scale).round() as i64, WINDOW as i64)
}

/// Annotation box of a joint centered at `(cx, cy)` in original coordinates:
/// the detection window size mapped up by `1 / scale`.
pub fn annotation_box(cx: i64, cy: i64, scale: f64) -> BBox {
    BBox::centered(cx, cy, (WINDOW as f64 / scale).round() as i64)
}

/// `|A ∩ D| / |A ∪ D|` over pixel sets, in exact integer arithmetic.
pub fn jaccard(a: &BBox, d: &BBox) -> f64 {
    let inter = a.intersection_area(d);
    let union = a.area() + d.area() - inter;
    if union <= 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Crops a `size`×`size` region of the original radiograph around a
/// detection. The window is shifted, never shrunk, to stay inside the image.
pub fn extract_joint_region(original: &GrayImage, det: &Detection, size: usize) -> Result<GrayImage> {
    let (cx, cy) = det.original_center();
    extract_region_at(original, cx, cy, size)
}

/// As [`extract_joint_region`] for an explicit original-coordinate center.
pub fn extract_region_at(original: &GrayImage, cx: i64, cy: i64, size: usize) -> Result<GrayImage> {
    if original.width() < size || original.height() < size {
        return Err(arg(format!(
            "image {}x{} is smaller than the {size}x{size} joint region",
            original.width(),
            original.height()
        )));
    }
    let s = size as i64;
    let x = (cx - s / 2).clamp(0, original.width() as i64 - s);
    let y = (cy - s / 2).clamp(0, original.height() as i64 - s);
    extract_patch(original, &BBox::new(x, y, s, s)?)
}

/// A detection tied to the radiograph and side it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyedDetection {
    pub image_id: String,
    pub side: Side,
    pub detection: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionReport {
    pub rate_exact: f64,
    pub rate_half: f64,
    pub rate_any: f64,
    pub mean_jaccard: f64,
    pub count: usize,
    pub seconds_per_image: f64,
}

/// Scores detections against annotations in original coordinates and reports
/// the fractions at `J = 1`, `J ≥ 0.5`, `J > 0` plus the mean index.
pub fn evaluate_detections(
    truth: &[AnnotationRecord],
    found: &[KeyedDetection],
    seconds_per_image: f64,
) -> Result<DetectionReport> {
    if found.is_empty() {
        return Err(data("no detections to evaluate"));
    }
    let mut exact = 0usize;
    let mut half = 0usize;
    let mut any = 0usize;
    let mut total = 0.0;
    for k in found {
        let gt = truth
            .iter()
            .find(|a| a.image_id == k.image_id && a.side == k.side)
            .ok_or_else(|| data(format!("no annotation for image {:?} side {}", k.image_id, k.side)))?;
        let j = jaccard(&gt.bbox, &k.detection.to_original());
        exact += (j == 1.0) as usize;
        half += (j >= 0.5) as usize;
        any += (j > 0.0) as usize;
        total += j;
    }
    let n = found.len() as f64;
    Ok(DetectionReport {
        rate_exact: exact as f64 / n,
        rate_half: half as f64 / n,
        rate_any: any as f64 / n,
        mean_jaccard: total / n,
        count: found.len(),
        seconds_per_image,
    })
}

impl DetectionReport {
    /// Flat `key = value` text. Timing is excluded so the text is a pure
    /// function of the inputs; see [`DetectionReport::timing_kv`].
    pub fn to_kv(&self) -> String {
        format!(
            "count = {}\nrate_j_eq_1 = {}\nrate_j_ge_0.5 = {}\nrate_j_gt_0 = {}\nmean_jaccard = {}\n",
            self.count, self.rate_exact, self.rate_half, self.rate_any, self.mean_jaccard
        )
    }

    pub fn timing_kv(&self) -> String {
        format!("seconds_per_image = {}\n", self.seconds_per_image)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = DetectionReport {
            rate_exact: 0.0,
            rate_half: 0.0,
            rate_any: 0.0,
            mean_jaccard: 0.0,
            count: 0,
            seconds_per_image: 0.0,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| data(format!("bad report line {line:?}")))?;
            let v = v.trim();
            let f = || v.parse::<f64>().map_err(|_| data(format!("bad value in {line:?}")));
            match k.trim() {
                "count" => r.count = v.parse().map_err(|_| data(format!("bad count {v:?}")))?,
                "rate_j_eq_1" => r.rate_exact = f()?,
                "rate_j_ge_0.5" => r.rate_half = f()?,
                "rate_j_gt_0" => r.rate_any = f()?,
                "mean_jaccard" => r.mean_jaccard = f()?,
                "seconds_per_image" => r.seconds_per_image = f()?,
                other => return Err(data(format!("unknown report key {other:?}"))),
            }
        }
        Ok(r)
    }

    /// Pretty table row set for several methods.
    pub fn table(rows: &[(&str, &DetectionReport)]) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<20} {:>8} {:>8} {:>8} {:>8} {:>12}",
            "Method", "J=1", "J>=0.5", "J>0", "meanJ", "s/image"
        )
        .unwrap();
        for (name, r) in rows {
            writeln!(
                out,
                "{:<20} {:>7.1}% {:>7.1}% {:>7.1}% {:>8.3} {:>12.5}",
                name,
                100.0 * r.rate_exact,
                100.0 * r.rate_half,
                100.0 * r.rate_any,
                r.mean_jaccard,
                r.seconds_per_image
            )
            .unwrap();
        }
        out
    }
}
