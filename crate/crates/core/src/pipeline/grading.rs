//! Joint crops, base-network pre-training, feature-tap SVM grading and the
//! classification-versus-regression fine-tuning comparison.

use super::split::{split_indices, JointSample, SplitSpec};
use super::synth::{coarse_grade, synth_images, SynthConfig};
use crate::detect::{extract_region_at, Side};
use crate::error::{arg, data, Result};
use crate::imaging::{downscale, GrayImage};
use crate::metrics::{class_report, confusion, most_frequent_grade, mse, mse_grades, round_to_grade, ClassReport};
use crate::minicnn::{
    extract_features, finetune, predict_all, replace_head, HeadKind, LearningCurves, LossKind, Network, Tensor,
    TrainConfig,
};
use crate::svm::{train_ovr, MulticlassSvm, SvmTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropConfig {
    /// Side of the square region cut from the original radiograph.
    pub size: usize,
    /// Side of the network input the region is reduced to.
    pub input: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { size: 300, input: 64 }
    }
}

/// Cuts the joint region around `center` and reduces it to network input size.
pub fn joint_input(original: &GrayImage, center: (i64, i64), cfg: &CropConfig) -> Result<GrayImage> {
    if cfg.input == 0 || cfg.input > cfg.size {
        return Err(arg(format!("crop input {} must lie in 1..={}", cfg.input, cfg.size)));
    }
    let region = extract_region_at(original, center.0, center.1, cfg.size)?;
    if cfg.input == cfg.size {
        return Ok(region);
    }
    let small = downscale(&region, cfg.input as f64 / cfg.size as f64)?;
    if small.width() != cfg.input || small.height() != cfg.input {
        return Err(arg(format!(
            "crop {} does not reduce to {} pixels",
            cfg.size, cfg.input
        )));
    }
    Ok(small)
}

/// Both joints of every image, graded per image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradingSet {
    pub image_ids: Vec<String>,
    pub grades: Vec<u8>,
    pub joints: Vec<[JointSample; 2]>,
}

impl GradingSet {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// Adds the left and right crops of one radiograph.
    pub fn push(
        &mut self,
        image_id: &str,
        grade: u8,
        original: &GrayImage,
        centers: [(i64, i64); 2],
        crop: &CropConfig,
    ) -> Result<()> {
        let sample = |side: Side, c| -> Result<JointSample> {
            Ok(JointSample {
                id: format!("{image_id}_{side}"),
                image: joint_input(original, c, crop)?,
                grade,
            })
        };
        self.joints
            .push([sample(Side::Left, centers[0])?, sample(Side::Right, centers[1])?]);
        self.image_ids.push(image_id.to_string());
        self.grades.push(grade);
        Ok(())
    }

    /// Joint samples of the given images, left then right.
    pub fn take(&self, images: &[usize]) -> Vec<JointSample> {
        images.iter().flat_map(|&i| self.joints[i].iter().cloned()).collect()
    }
}

pub fn tensors(samples: &[JointSample]) -> Vec<(Tensor, u8)> {
    samples
        .iter()
        .map(|s| (Tensor::from_image(&s.image), s.grade))
        .collect()
}

/// Crops of the pre-training source task at the true joint centers, labelled
/// with coarse severity.
pub fn source_set(synth: &SynthConfig, crop: &CropConfig) -> Result<GradingSet> {
    let mut set = GradingSet::default();
    for img in synth_images(synth)? {
        let img = img?;
        set.push(
            &img.image_id,
            coarse_grade(img.grade),
            &img.image,
            [img.left.center, img.right.center],
            crop,
        )?;
    }
    Ok(set)
}

/// Trains the standard network from `init_seed` on a source set, holding out
/// `val_fraction` of its images for snapshot selection.
pub fn pretrain(
    set: &GradingSet,
    val_fraction: f64,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(Network, LearningCurves)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(arg(format!("validation fraction {val_fraction} must lie in (0, 1)")));
    }
    let spec = SplitSpec::new([1.0 - val_fraction, val_fraction, 0.0], cfg.seed, true)?;
    let [train, val, _] = split_indices(&set.grades, &spec)?;
    let net = Network::standard(HeadKind::Softmax5, init_seed)?;
    finetune(
        &net,
        &tensors(&set.take(&train)),
        &tensors(&set.take(&val)),
        LossKind::SoftmaxCrossEntropy,
        cfg,
    )
}

/// One-vs-rest SVM grading from one feature tap.
#[derive(Debug, Clone, PartialEq)]
pub struct TapGrading {
    pub tap: String,
    pub c: f64,
    pub model: MulticlassSvm,
    pub truth: Vec<u8>,
    pub predictions: Vec<u8>,
    pub report: ClassReport,
    pub mse: f64,
}

pub fn tap_features(net: &Network, samples: &[JointSample], tap: &str) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| extract_features(net, &s.image, tap)).collect()
}

/// One-vs-rest SVM on feature vectors. The step size `cfg.eta0` is divided by
/// the feature dimension, the expected squared norm of a standardized vector.
pub fn train_feature_svm(xs: &[Vec<f64>], ys: &[u8], cfg: &SvmTrainConfig) -> Result<MulticlassSvm> {
    let dim = xs.first().map_or(1, Vec::len).max(1);
    let cfg = SvmTrainConfig {
        eta0: cfg.eta0 / dim as f64,
        ..cfg.clone()
    };
    train_ovr(xs, ys, &cfg)
}

/// Trains on `train` features from `tap` and grades `test`.
pub fn grade_with_tap(
    net: &Network,
    train: &[JointSample],
    test: &[JointSample],
    tap: &str,
    cfg: &SvmTrainConfig,
) -> Result<TapGrading> {
    if test.is_empty() {
        return Err(data("tap grading needs test samples"));
    }
    let xs = tap_features(net, train, tap)?;
    let ys: Vec<u8> = train.iter().map(|s| s.grade).collect();
    let model = train_feature_svm(&xs, &ys, cfg)?;
    let truth: Vec<u8> = test.iter().map(|s| s.grade).collect();
    let predictions = tap_features(net, test, tap)?
        .iter()
        .map(|x| model.predict_grade(x))
        .collect::<Result<Vec<u8>>>()?;
    Ok(TapGrading {
        tap: tap.to_string(),
        c: cfg.c,
        report: class_report(&confusion(&truth, &predictions)?),
        mse: mse_grades(&truth, &predictions)?,
        model,
        truth,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutcome {
    pub network: Network,
    pub curves: LearningCurves,
    /// Raw test predictions: class index or regression output.
    pub predictions: Vec<f64>,
}

/// The same base network fine-tuned under both losses on identical data.
#[derive(Debug, Clone, PartialEq)]
pub struct LossComparison {
    pub truth: Vec<u8>,
    /// Most frequent training grade.
    pub baseline: u8,
    pub classification: HeadOutcome,
    pub regression: HeadOutcome,
}

impl LossComparison {
    pub fn classification_grades(&self) -> Vec<u8> {
        self.classification.predictions.iter().map(|p| *p as u8).collect()
    }

    pub fn regression_grades(&self) -> Result<Vec<u8>> {
        self.regression.predictions.iter().map(|p| round_to_grade(*p)).collect()
    }

    pub fn mse_classification(&self) -> Result<f64> {
        mse(&self.truth, &self.classification.predictions)
    }

    pub fn mse_regression(&self) -> Result<f64> {
        mse(&self.truth, &self.regression.predictions)
    }

    pub fn mse_regression_rounded(&self) -> Result<f64> {
        mse_grades(&self.truth, &self.regression_grades()?)
    }

    pub fn mse_baseline(&self) -> Result<f64> {
        mse_grades(&self.truth, &vec![self.baseline; self.truth.len()])
    }

    pub fn classification_report(&self) -> Result<ClassReport> {
        Ok(class_report(&confusion(&self.truth, &self.classification_grades())?))
    }

    pub fn regression_report(&self) -> Result<ClassReport> {
        Ok(class_report(&confusion(&self.truth, &self.regression_grades()?)?))
    }
}

/// Replaces the head of `base` twice with the same seed and fine-tunes a
/// softmax and a regression network on the same samples.
pub fn compare_losses(
    base: &Network,
    train: &[JointSample],
    val: &[JointSample],
    test: &[JointSample],
    cfg: &TrainConfig,
    head_seed: u64,
) -> Result<LossComparison> {
    if test.is_empty() {
        return Err(data("loss comparison needs test samples"));
    }
    let (tr, va, te) = (tensors(train), tensors(val), tensors(test));
    let run = |head: HeadKind, loss: LossKind| -> Result<HeadOutcome> {
        let net = replace_head(base, head, head_seed)?;
        let (network, curves) = finetune(&net, &tr, &va, loss, cfg)?;
        let predictions = predict_all(&network, &te)?;
        Ok(HeadOutcome {
            network,
            curves,
            predictions,
        })
    };
    let train_grades: Vec<u8> = train.iter().map(|s| s.grade).collect();
    Ok(LossComparison {
        truth: test.iter().map(|s| s.grade).collect(),
        baseline: most_frequent_grade(&train_grades),
        classification: run(HeadKind::Softmax5, LossKind::SoftmaxCrossEntropy)?,
        regression: run(HeadKind::Regression1, LossKind::Euclidean)?,
    })
}
