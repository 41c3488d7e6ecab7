use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{jaccard, to_detection_box, AnnotationRecord, Detection, Preprocessed, ScanConfig, Side, WINDOW};
use crate::error::{arg, data, io_err, Error, Result};
use crate::imaging::{extract_patch, sobel_horizontal, sobel_rows, BBox, GrayImage};
use crate::svm::{train_linear_svm, LinearSvmModel, SvmTrainConfig};
use crate::GRADES;

const AREA: usize = WINDOW * WINDOW;

/// Exemplar joint patches for template matching.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub patches: Vec<GrayImage>,
    pub grades: Vec<u8>,
}

impl TemplateSet {
    pub fn new(patches: Vec<GrayImage>, grades: Vec<u8>) -> Result<Self> {
        if patches.is_empty() {
            return Err(arg("template set is empty"));
        }
        if patches.len() != grades.len() {
            return Err(arg("templates and grades differ in length"));
        }
        if patches.iter().any(|p| p.width() != WINDOW || p.height() != WINDOW) {
            return Err(arg(format!("every template must be {WINDOW}x{WINDOW}")));
        }
        Ok(Self { patches, grades })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// `templates-v1` text: a count line, then one line per template holding
    /// its grade and 400 row-major intensities.
    pub fn to_text(&self) -> String {
        let mut out = format!("templates-v1\ncount {}\n", self.len());
        for (p, g) in self.patches.iter().zip(&self.grades) {
            out.push_str(&g.to_string());
            for v in p.data() {
                out.push(' ');
                out.push_str(&format!("{v:.17e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some("templates-v1") => {}
            Some(other) if other.starts_with("templates-") => {
                return Err(Error::Version {
                    path: path.to_path_buf(),
                    expected: "templates-v1".into(),
                    found: other.into(),
                })
            }
            _ => return Err(bad("missing templates-v1 header".into())),
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("count "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing count line".into()))?;
        let mut patches = Vec::with_capacity(count);
        let mut grades = Vec::with_capacity(count);
        for i in 0..count {
            let line = lines.next().ok_or_else(|| bad(format!("truncated at template {i}")))?;
            let mut fields = line.split_ascii_whitespace();
            let g: u8 = fields
                .next()
                .and_then(|g| g.parse().ok())
                .filter(|g| (*g as usize) < GRADES)
                .ok_or_else(|| bad(format!("bad grade in template {i}")))?;
            let values: Vec<f64> = fields
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("template {i}: {e}")))?;
            if values.len() != AREA {
                return Err(bad(format!("template {i} has {} values", values.len())));
            }
            patches.push(GrayImage::new(WINDOW, WINDOW, values).map_err(|e| bad(e.to_string()))?);
            grades.push(g);
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing data".into()));
        }
        Self::new(patches, grades).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text, path)
    }
}

/// An annotated joint on a preprocessed radiograph.
#[derive(Debug, Clone, Copy)]
pub struct AnnotatedJoint<'a> {
    pub image: &'a Preprocessed,
    pub record: &'a AnnotationRecord,
    pub grade: u8,
}

impl AnnotatedJoint<'_> {
    fn window(&self) -> Result<BBox> {
        let b = to_detection_box(&self.record.bbox, self.image.scale);
        if !self.image.image.bounds().contains_box(&b) {
            return Err(data(format!(
                "annotation for {} {} falls outside the detection-scale image",
                self.record.image_id, self.record.side
            )));
        }
        Ok(b)
    }
}

/// Takes the first `per_grade` joints of each grade in (image id, side) order.
pub fn build_templates(annotated: &[AnnotatedJoint<'_>], per_grade: usize) -> Result<TemplateSet> {
    if per_grade == 0 {
        return Err(arg("per_grade must be at least 1"));
    }
    let mut patches = Vec::with_capacity(per_grade * GRADES);
    let mut grades = Vec::with_capacity(per_grade * GRADES);
    for g in 0..GRADES as u8 {
        let mut of_grade: Vec<&AnnotatedJoint<'_>> = annotated.iter().filter(|a| a.grade == g).collect();
        if of_grade.len() < per_grade {
            return Err(data(format!(
                "grade {g} has {} annotated joints, {per_grade} needed for templates",
                of_grade.len()
            )));
        }
        of_grade.sort_by(|a, b| (&a.record.image_id, a.record.side).cmp(&(&b.record.image_id, b.record.side)));
        for a in of_grade.into_iter().take(per_grade) {
            patches.push(extract_patch(&a.image.image, &a.window()?)?);
            grades.push(g);
        }
    }
    TemplateSet::new(patches, grades)
}

/// Column range `[start, end)` of each half.
fn half_ranges(img: &GrayImage) -> Result<[(usize, usize); 2]> {
    if img.width() < 2 {
        return Err(arg("image too narrow to split"));
    }
    let mid = img.width() / 2;
    let ranges = [(0, mid), (mid, img.width())];
    for (s, e) in ranges {
        if e - s < WINDOW || img.height() < WINDOW {
            return Err(arg(format!(
                "half-image {}x{} is smaller than the {WINDOW}x{WINDOW} window",
                e - s,
                img.height()
            )));
        }
    }
    Ok(ranges)
}

fn copy_window(img: &GrayImage, x: usize, y: usize, buf: &mut [f64; AREA]) {
    let w = img.width();
    let data = img.data();
    for r in 0..WINDOW {
        let src = (y + r) * w + x;
        buf[r * WINDOW..(r + 1) * WINDOW].copy_from_slice(&data[src..src + WINDOW]);
    }
}

/// Scans one half in row-major order; a later window wins only on a strictly
/// greater score, so ties keep the smallest (y, x).
fn scan_half(
    img: &GrayImage,
    cols: (usize, usize),
    stride: usize,
    mut score: impl FnMut(usize, usize) -> f64,
) -> (BBox, f64) {
    let mut best = (BBox::centered(0, 0, WINDOW as i64), f64::NEG_INFINITY);
    let mut first = true;
    for y in (0..=img.height() - WINDOW).step_by(stride) {
        for x in (cols.0..=cols.1 - WINDOW).step_by(stride) {
            let s = score(x, y);
            if first || s > best.1 {
                best = (BBox::new(x as i64, y as i64, WINDOW as i64, WINDOW as i64).unwrap(), s);
                first = false;
            }
        }
    }
    best
}

fn check_stride(scan: &ScanConfig) -> Result<()> {
    if scan.stride == 0 {
        return Err(arg("scan stride must be at least 1"));
    }
    Ok(())
}

/// Nearest-template search per half. The score of a window is the negated
/// Euclidean distance to its closest template.
pub fn detect_template_matching(
    img: &Preprocessed,
    templates: &TemplateSet,
    scan: &ScanConfig,
) -> Result<(Detection, Detection)> {
    check_stride(scan)?;
    let ranges = half_ranges(&img.image)?;
    let mut buf = [0.0; AREA];
    let mut run = |cols| {
        let (bbox, score) = scan_half(&img.image, cols, scan.stride, |x, y| {
            copy_window(&img.image, x, y, &mut buf);
            let mut best = f64::INFINITY;
            for t in &templates.patches {
                let d: f64 = buf.iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best {
                    best = d;
                }
            }
            -best.sqrt()
        });
        Detection {
            bbox,
            score,
            scale: img.scale,
        }
    };
    Ok((run(ranges[0]), run(ranges[1])))
}

/// Linear-SVM scan per half over horizontal-edge Sobel features of each window.
pub fn detect_svm(img: &Preprocessed, model: &LinearSvmModel, scan: &ScanConfig) -> Result<(Detection, Detection)> {
    check_stride(scan)?;
    if model.dim() != AREA {
        return Err(arg(format!(
            "detector model has dimension {}, expected {AREA}",
            model.dim()
        )));
    }
    let ranges = half_ranges(&img.image)?;
    let (w, b) = model.folded();
    let mut buf = [0.0; AREA];
    let mut grad = [0.0; AREA];
    let mut run = |cols| {
        let (bbox, score) = scan_half(&img.image, cols, scan.stride, |x, y| {
            copy_window(&img.image, x, y, &mut buf);
            sobel_rows(&buf, WINDOW, WINDOW, &mut grad);
            grad.iter().zip(&w).map(|(g, w)| g * w).sum::<f64>() + b
        });
        Detection {
            bbox,
            score,
            scale: img.scale,
        }
    };
    Ok((run(ranges[0]), run(ranges[1])))
}

/// Flattened Sobel response of a 20×20 patch.
pub fn patch_features(patch: &GrayImage) -> Result<Vec<f64>> {
    if patch.width() != WINDOW || patch.height() != WINDOW {
        return Err(arg(format!(
            "detector patches must be {WINDOW}x{WINDOW}, got {}x{}",
            patch.width(),
            patch.height()
        )));
    }
    Ok(sobel_horizontal(patch)?.values)
}

/// Trains the joint / non-joint classifier on Sobel features.
pub fn train_joint_detector(pos: &[GrayImage], neg: &[GrayImage], cfg: &SvmTrainConfig) -> Result<LinearSvmModel> {
    if pos.is_empty() || neg.is_empty() {
        return Err(data(format!(
            "detector training needs both classes, got {} positive and {} negative patches",
            pos.len(),
            neg.len()
        )));
    }
    let mut features = Vec::with_capacity(pos.len() + neg.len());
    let mut labels = Vec::with_capacity(pos.len() + neg.len());
    for p in pos {
        features.push(patch_features(p)?);
        labels.push(1);
    }
    for n in neg {
        features.push(patch_features(n)?);
        labels.push(-1);
    }
    train_linear_svm(&features, &labels, cfg)
}

#[derive(Debug, Clone, Default)]
pub struct DetectorSamples {
    pub positives: Vec<GrayImage>,
    pub negatives: Vec<GrayImage>,
}

/// Cuts positive patches at annotated joints and `negatives_per_joint` random
/// patches per joint from the same half whose Jaccard with the joint is 0.
pub fn sample_detector_patches(
    joints: &[AnnotatedJoint<'_>],
    negatives_per_joint: usize,
    seed: u64,
) -> Result<DetectorSamples> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DetectorSamples::default();
    for j in joints {
        let img = &j.image.image;
        let truth = j.window()?;
        out.positives.push(extract_patch(img, &truth)?);
        let ranges = half_ranges(img)?;
        let (c0, c1) = match j.record.side {
            Side::Left => ranges[0],
            Side::Right => ranges[1],
        };
        let mut taken = 0;
        let mut attempts = 0;
        while taken < negatives_per_joint {
            attempts += 1;
            if attempts > 10_000 {
                return Err(data(format!(
                    "no room for negatives beside the joint in {} {}",
                    j.record.image_id, j.record.side
                )));
            }
            let x = rng.random_range(c0..=c1 - WINDOW) as i64;
            let y = rng.random_range(0..=img.height() - WINDOW) as i64;
            let cand = BBox::new(x, y, WINDOW as i64, WINDOW as i64)?;
            if jaccard(&cand, &truth) == 0.0 {
                out.negatives.push(extract_patch(img, &cand)?);
                taken += 1;
            }
        }
    }
    Ok(out)
}
