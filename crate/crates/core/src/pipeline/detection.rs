use std::time::Instant;

use crate::detect::{
    build_templates, detect_svm, detect_template_matching, evaluate_detections, preprocess, sample_detector_patches,
    train_joint_detector, AnnotatedJoint, AnnotationRecord, DetectionReport, KeyedDetection, PreprocessConfig,
    Preprocessed, ScanConfig, Side, TemplateSet,
};
use crate::error::{data, Result};
use crate::imaging::GrayImage;
use crate::svm::{LinearSvmModel, SvmTrainConfig};

/// A radiograph reduced to detection scale, with its ground truth.
#[derive(Debug, Clone)]
pub struct DetectionImage {
    pub image_id: String,
    pub grade: u8,
    pub image: Preprocessed,
    pub annotations: Vec<AnnotationRecord>,
}

impl DetectionImage {
    pub fn new(
        image_id: &str,
        grade: u8,
        original: &GrayImage,
        annotations: Vec<AnnotationRecord>,
        cfg: &PreprocessConfig,
    ) -> Result<Self> {
        Ok(Self {
            image_id: image_id.to_string(),
            grade,
            image: preprocess(original, cfg)?,
            annotations,
        })
    }
}

/// Detector regularization, picked by a sweep on held-out synthetic corpora.
pub const DETECTOR_C: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTraining {
    pub templates_per_grade: usize,
    pub negatives_per_joint: usize,
    pub svm: SvmTrainConfig,
    pub seed: u64,
}

impl Default for DetectorTraining {
    fn default() -> Self {
        Self {
            templates_per_grade: 10,
            negatives_per_joint: 3,
            svm: SvmTrainConfig {
                c: DETECTOR_C,
                ..SvmTrainConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModels {
    pub templates: TemplateSet,
    pub svm: LinearSvmModel,
}

fn joints(images: &[DetectionImage]) -> Vec<AnnotatedJoint<'_>> {
    images
        .iter()
        .flat_map(|d| {
            d.annotations.iter().map(move |a| AnnotatedJoint {
                image: &d.image,
                record: a,
                grade: d.grade,
            })
        })
        .collect()
}

/// Builds the template set and trains the SVM detector on annotated images.
pub fn train_detectors(images: &[DetectionImage], cfg: &DetectorTraining) -> Result<DetectorModels> {
    let joints = joints(images);
    if joints.is_empty() {
        return Err(data("detector training needs annotated joints"));
    }
    let templates = build_templates(&joints, cfg.templates_per_grade)?;
    let samples = sample_detector_patches(&joints, cfg.negatives_per_joint, cfg.seed)?;
    let svm = train_joint_detector(
        &samples.positives,
        &samples.negatives,
        &SvmTrainConfig {
            seed: cfg.seed,
            ..cfg.svm.clone()
        },
    )?;
    Ok(DetectorModels { templates, svm })
}

/// Detections and detector-only wall clock for a set of images.
#[derive(Debug, Clone, Default)]
pub struct DetectionRun {
    pub svm: Vec<KeyedDetection>,
    pub template: Vec<KeyedDetection>,
    pub svm_seconds: f64,
    pub template_seconds: f64,
    pub images: usize,
}

fn keyed(id: &str, pair: (crate::detect::Detection, crate::detect::Detection)) -> [KeyedDetection; 2] {
    [(Side::Left, pair.0), (Side::Right, pair.1)].map(|(side, detection)| KeyedDetection {
        image_id: id.to_string(),
        side,
        detection,
    })
}

impl DetectionRun {
    /// Runs both detectors on one image, timing each scan.
    pub fn add(&mut self, img: &DetectionImage, models: &DetectorModels, scan: &ScanConfig) -> Result<()> {
        let t = Instant::now();
        let s = detect_svm(&img.image, &models.svm, scan)?;
        self.svm_seconds += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let m = detect_template_matching(&img.image, &models.templates, scan)?;
        self.template_seconds += t.elapsed().as_secs_f64();
        self.svm.extend(keyed(&img.image_id, s));
        self.template.extend(keyed(&img.image_id, m));
        self.images += 1;
        Ok(())
    }

    /// `(svm, template)` reports against `truth`.
    pub fn evaluate(&self, truth: &[AnnotationRecord]) -> Result<(DetectionReport, DetectionReport)> {
        let n = self.images.max(1) as f64;
        Ok((
            evaluate_detections(truth, &self.svm, self.svm_seconds / n)?,
            evaluate_detections(truth, &self.template, self.template_seconds / n)?,
        ))
    }
}
