//! Experiment configuration: TOML with one section per stage. Every key has
//! a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::detection::{DetectorTraining, DETECTOR_C};
use super::grading::CropConfig;
use super::split::SplitSpec;
use super::synth::SynthConfig;
use crate::detect::{PreprocessConfig, ScanConfig};
use crate::error::{arg, io_err, Error, Result};
use crate::metrics::Averaging;
use crate::minicnn::TrainConfig;
use crate::svm::SvmTrainConfig;
use crate::GRADES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every split, sampler, initializer and shuffle of the run.
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub stages: StageConfig,
    pub detect: DetectConfig,
    pub extract: ExtractConfig,
    pub pretrain: PretrainConfig,
    pub features: FeatureConfig,
    pub finetune: FinetuneConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            synth: SynthConfig {
                per_grade: [60; GRADES],
                ..SynthConfig::default()
            },
            stages: StageConfig::default(),
            detect: DetectConfig::default(),
            extract: ExtractConfig::default(),
            pretrain: PretrainConfig::default(),
            features: FeatureConfig::default(),
            finetune: FinetuneConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// A real dataset. When `labels` is unset the run generates the `[synth]`
/// corpus instead.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub detection: bool,
    pub features: bool,
    pub finetune: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            detection: true,
            features: true,
            finetune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub scale: f64,
    pub equalize: bool,
    pub stride: usize,
    pub templates_per_grade: usize,
    pub negatives_per_joint: usize,
    pub c: f64,
    pub epochs: usize,
    pub eta0: f64,
    /// Extra C values trained and evaluated alongside `c`, reported only.
    pub c_sweep: Vec<f64>,
    /// Train, validation and test fractions of images.
    pub split: [f64; 3],
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            scale: 0.1,
            equalize: true,
            stride: 1,
            templates_per_grade: 10,
            negatives_per_joint: 3,
            c: DETECTOR_C,
            epochs: 50,
            eta0: 0.5,
            c_sweep: vec![1.0, 0.01],
            split: [0.7, 0.0, 0.3],
        }
    }
}

impl DetectConfig {
    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            scale: self.scale,
            equalize: self.equalize,
        }
    }

    pub fn scan(&self) -> ScanConfig {
        ScanConfig { stride: self.stride }
    }

    pub fn training(&self, c: f64, seed: u64) -> DetectorTraining {
        DetectorTraining {
            templates_per_grade: self.templates_per_grade,
            negatives_per_joint: self.negatives_per_joint,
            svm: SvmTrainConfig {
                c,
                epochs: self.epochs,
                eta0: self.eta0,
                seed,
                ..SvmTrainConfig::default()
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropSource {
    /// Centers found by the SVM detector.
    Svm,
    /// Annotated centers.
    Truth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub size: usize,
    pub input: usize,
    pub source: CropSource,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            size: 300,
            input: 64,
            source: CropSource::Svm,
        }
    }
}

impl ExtractConfig {
    pub fn crop(&self) -> CropConfig {
        CropConfig {
            size: self.size,
            input: self.input,
        }
    }
}

/// Base-network training on the coarse-severity source task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub per_grade: usize,
    /// Seed of the source corpus, independent of the target corpus.
    pub source_seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub val_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            per_grade: 30,
            source_seed: 101,
            lr: 0.003,
            epochs: 15,
            batch_size: 32,
            momentum: 0.9,
            val_fraction: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn source(&self) -> SynthConfig {
        SynthConfig::source_task(self.per_grade, self.source_seed)
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub taps: Vec<String>,
    pub c: f64,
    pub epochs: usize,
    /// Initial step per feature; divided by each tap's dimension.
    pub eta0: f64,
    pub c_sweep: Vec<f64>,
    pub split: [f64; 3],
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            taps: vec!["fc-feat".into(), "pool2".into(), "conv2".into()],
            c: 1.0,
            epochs: 50,
            eta0: 0.5,
            c_sweep: vec![0.1, 10.0],
            split: [0.7, 0.0, 0.3],
        }
    }
}

impl FeatureConfig {
    pub fn svm(&self, c: f64, seed: u64) -> SvmTrainConfig {
        SvmTrainConfig {
            c,
            epochs: self.epochs,
            eta0: self.eta0,
            seed,
            ..SvmTrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub split: [f64; 3],
    /// Add mirrored twins to the training partition.
    pub flips: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 20,
            batch_size: 16,
            momentum: 0.9,
            split: [0.6, 0.1, 0.3],
            flips: true,
        }
    }
}

impl FinetuneConfig {
    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// How the mean precision/recall/F1 rows combine grades.
    pub averaging: Averaging,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| arg(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Argument(msg) => arg(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.labels, &mut cfg.data.annotations, &mut cfg.data.image_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.labels.is_none() {
            self.synth.validate()?;
        } else if self.data.annotations.is_none() {
            return Err(arg("data.annotations is required with data.labels"));
        }
        for (name, split) in [
            ("detect", self.detect.split),
            ("features", self.features.split),
            ("finetune", self.finetune.split),
        ] {
            SplitSpec::new(split, self.seed, true).map_err(|e| arg(format!("{name}.split: {e}")))?;
        }
        if self.detect.split[2] == 0.0 || self.features.split[2] == 0.0 || self.finetune.split[2] == 0.0 {
            return Err(arg("every stage split needs a test fraction"));
        }
        if self.finetune.split[1] == 0.0 {
            return Err(arg("finetune.split needs a validation fraction"));
        }
        if !(self.detect.scale > 0.0 && self.detect.scale <= 1.0) || self.detect.stride == 0 {
            return Err(arg("detect.scale must lie in (0, 1] and detect.stride be positive"));
        }
        for c in std::iter::once(self.detect.c).chain(self.detect.c_sweep.iter().copied()) {
            self.detect.training(c, 0).svm.validate()?;
        }
        for c in std::iter::once(self.features.c).chain(self.features.c_sweep.iter().copied()) {
            self.features.svm(c, 0).validate()?;
        }
        if self.extract.input == 0 || self.extract.input > self.extract.size {
            return Err(arg("extract.input must lie in 1..=extract.size"));
        }
        if self.stages.features && self.features.taps.is_empty() {
            return Err(arg("features.taps is empty"));
        }
        if !self.stages.detection && self.extract.source == CropSource::Svm {
            return Err(arg("extract.source = \"svm\" needs the detection stage"));
        }
        if self.pretrain.per_grade == 0 {
            return Err(arg("pretrain.per_grade must be positive"));
        }
        self.pretrain.train(0).validate()?;
        self.finetune.train(0).validate()?;
        Ok(())
    }
}
