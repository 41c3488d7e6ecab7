//! Dataset handling, the synthetic corpus, experiment orchestration and the
//! annotation service.

mod config;
mod detection;
mod grading;
mod manifest;
mod run;
mod service;
mod split;
mod synth;

pub use config::{
    CropSource, DataConfig, DetectConfig, ExtractConfig, FeatureConfig, FinetuneConfig, PretrainConfig, ReportConfig,
    RunConfig, StageConfig,
};
pub use detection::{train_detectors, DetectionImage, DetectionRun, DetectorModels, DetectorTraining, DETECTOR_C};
pub use grading::{
    compare_losses, grade_with_tap, joint_input, pretrain, source_set, tap_features, tensors, train_feature_svm,
    CropConfig, GradingSet, HeadOutcome, LossComparison, TapGrading,
};
pub use manifest::{grade_counts_text, load_manifest, write_labels, DatasetManifest, ManifestRecord};
pub use run::{load_dataset, run_experiment, DetectionOutcome, FinetuneOutcome, RunReport, TapOutcome};
pub use service::{annotation_router, serve_annotation, AnnotationService};
pub use split::{augment_flips, split_dataset, split_indices, DatasetSplit, JointSample, Partition, SplitSpec};
pub use synth::{coarse_grade, synth_generate, synth_image, synth_images, SynthConfig, SynthImage, SynthJoint};
