//! End-to-end experiment: detection, joint extraction, pre-training,
//! feature-tap grading and loss comparison, with every artifact written under
//! one run directory.
//!
//! ```text
//! <out>/config.resolved
//! <out>/annotations.csv
//! <out>/data/            generated corpus (synthetic runs only)
//! <out>/models/          detector.svm, templates.txt, base.cnn, svm_<tap>.txt,
//!                        finetune_classification.cnn, finetune_regression.cnn
//! <out>/curves/          pretrain.csv, finetune_classification.csv, finetune_regression.csv
//! <out>/reports/         summary.txt, mse.txt, splits.csv, training_ids.csv, ...
//! <out>/reports/timing.txt   wall-clock figures, the only non-reproducible file
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use super::config::{CropSource, RunConfig};
use super::detection::{train_detectors, DetectionImage, DetectionRun};
use super::grading::{compare_losses, grade_with_tap, pretrain, source_set, GradingSet};
use super::manifest::{load_manifest, DatasetManifest};
use super::split::{augment_flips, split_indices, JointSample, Partition, SplitSpec};
use super::synth::synth_generate;
use crate::detect::{detect_svm, evaluate_detections, write_annotations, DetectionReport, KeyedDetection, Side};
use crate::error::{data, io_err, Result};
use crate::imaging::load_image;
use crate::metrics::{class_report_with, confusion, ClassReport};
use crate::minicnn::save_model;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutcome {
    pub svm: DetectionReport,
    pub template: DetectionReport,
    /// SVM detector rates for each swept C.
    pub sweep: Vec<(f64, DetectionReport)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapOutcome {
    pub tap: String,
    pub c: f64,
    pub report: ClassReport,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub baseline_grade: u8,
    pub classification: ClassReport,
    pub regression_rounded: ClassReport,
    pub mse_classification: f64,
    pub mse_regression: f64,
    pub mse_regression_rounded: f64,
    pub mse_baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub images: usize,
    pub detection: Option<DetectionOutcome>,
    pub pretrain_best_epoch: usize,
    pub pretrain_val_accuracy: f64,
    /// Every (tap, C) combination; the configured C comes first per tap.
    pub taps: Vec<TapOutcome>,
    pub finetune: Option<FinetuneOutcome>,
    pub skipped: Vec<String>,
    /// Seconds per stage. Not part of [`RunReport::to_text`].
    pub timing: Vec<(String, f64)>,
}

impl RunReport {
    /// `Method MSE` rows in the order baseline, taps, fine-tuned heads.
    pub fn mse_table(&self, primary_c: f64) -> String {
        let mut rows: Vec<(String, f64)> = Vec::new();
        if let Some(f) = &self.finetune {
            rows.push(("most-frequent".into(), f.mse_baseline));
        }
        for t in self.taps.iter().filter(|t| t.c == primary_c) {
            rows.push((format!("svm-{}", t.tap), t.mse));
        }
        if let Some(f) = &self.finetune {
            rows.push(("cnn-classification".into(), f.mse_classification));
            rows.push(("cnn-regression".into(), f.mse_regression));
            rows.push(("cnn-regression-rounded".into(), f.mse_regression_rounded));
        }
        let mut out = format!("{:<24} {:>8}\n", "Method", "MSE");
        for (name, v) in rows {
            writeln!(out, "{name:<24} {v:>8.3}").unwrap();
        }
        out
    }

    /// Reproducible plain-text summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "images = {}", self.images).unwrap();
        match &self.detection {
            Some(d) => {
                s.push_str("\n[detection.svm]\n");
                s.push_str(&d.svm.to_kv());
                s.push_str("\n[detection.template]\n");
                s.push_str(&d.template.to_kv());
                for (c, r) in &d.sweep {
                    writeln!(s, "\n[detection.svm.c_{c}]").unwrap();
                    s.push_str(&r.to_kv());
                }
            }
            None => s.push_str("\n[detection]\nskipped\n"),
        }
        writeln!(
            s,
            "\n[pretrain]\nbest_epoch = {}\nval_accuracy = {}",
            self.pretrain_best_epoch, self.pretrain_val_accuracy
        )
        .unwrap();
        for t in &self.taps {
            writeln!(
                s,
                "\n[features.{}.c_{}]\naccuracy = {}\nmean_f1 = {}\nmse = {}",
                t.tap, t.c, t.report.accuracy, t.report.mean_f1, t.mse
            )
            .unwrap();
        }
        if let Some(f) = &self.finetune {
            writeln!(
                s,
                "\n[finetune]\nbaseline_grade = {}\nmse_baseline = {}\nmse_classification = {}\nmse_regression = {}\nmse_regression_rounded = {}\naccuracy_classification = {}\naccuracy_regression_rounded = {}\nmean_f1_classification = {}\nmean_f1_regression_rounded = {}",
                f.baseline_grade,
                f.mse_baseline,
                f.mse_classification,
                f.mse_regression,
                f.mse_regression_rounded,
                f.classification.accuracy,
                f.regression_rounded.accuracy,
                f.classification.mean_f1,
                f.regression_rounded.mean_f1
            )
            .unwrap();
        }
        if !self.skipped.is_empty() {
            writeln!(s, "\nskipped = {}", self.skipped.join(", ")).unwrap();
        }
        s
    }

    pub fn timing_text(&self) -> String {
        let mut s = String::new();
        for (stage, secs) in &self.timing {
            writeln!(s, "{stage} = {secs:.3}").unwrap();
        }
        if let Some(d) = &self.detection {
            s.push('\n');
            s.push_str(&DetectionReport::table(&[("svm", &d.svm), ("template", &d.template)]));
        }
        s
    }
}

fn put(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn stage<T>(name: &str, timing: &mut Vec<(String, f64)>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f().map_err(|e| e.in_stage(name))?;
    timing.push((name.to_string(), t.elapsed().as_secs_f64()));
    Ok(out)
}

/// Loads the configured dataset, or generates the synthetic corpus under
/// `<out>/data`. Every image must carry both joint annotations.
pub fn load_dataset(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let manifest = match &cfg.data.labels {
        Some(labels) => {
            let dir = match &cfg.data.image_dir {
                Some(d) => d.clone(),
                None => labels.parent().unwrap_or(Path::new(".")).to_path_buf(),
            };
            load_manifest(labels, cfg.data.annotations.as_deref(), &dir)?
        }
        None => synth_generate(&cfg.synth, &out.join("data"))?,
    };
    if let Some(r) = manifest.records.iter().find(|r| r.left.is_none() || r.right.is_none()) {
        return Err(data(format!("image {:?} lacks a joint annotation", r.image_id)));
    }
    Ok(manifest)
}

fn split_log(stage: &str, ids: &[String], parts: &[Vec<usize>; 3], log: &mut String) {
    for (p, idx) in Partition::ALL.iter().zip(parts) {
        for &i in idx {
            writeln!(log, "{stage},{},{p}", ids[i]).unwrap();
        }
    }
}

fn id_log(stage: &str, samples: &[JointSample], log: &mut String) {
    for s in samples {
        writeln!(log, "{stage},{}", s.id).unwrap();
    }
}

/// Runs every configured stage, writing artifacts under `out`. A failing
/// stage aborts the run with its name; files written before it remain.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let mut timing = Vec::new();
    let mut skipped = Vec::new();
    for dir in ["models", "reports", "curves"] {
        let d = out.join(dir);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    put(&out.join("config.resolved"), cfg.to_toml())?;
    let seed = cfg.seed;

    let manifest = stage("data", &mut timing, || load_dataset(cfg, out))?;
    let truth = manifest.annotations();
    write_annotations(out.join("annotations.csv"), &truth)?;
    let ids: Vec<String> = manifest.records.iter().map(|r| r.image_id.clone()).collect();
    let grades = manifest.grades();
    let mut splits = String::from("stage,image_id,partition\n");
    let mut trained = String::from("stage,sample_id\n");

    let mut detection = None;
    let mut centers: Vec<[(i64, i64); 2]> = manifest
        .records
        .iter()
        .map(|r| Side::BOTH.map(|s| r.annotation(s).unwrap().bbox.center()))
        .collect();

    if cfg.stages.detection {
        detection = Some(stage("detection", &mut timing, || -> Result<DetectionOutcome> {
            let pre = cfg.detect.preprocess();
            let scan = cfg.detect.scan();
            let images = manifest
                .records
                .iter()
                .map(|r| {
                    let anns = Side::BOTH.map(|s| r.annotation(s).unwrap().clone()).to_vec();
                    DetectionImage::new(&r.image_id, r.grade, &load_image(&r.path)?, anns, &pre)
                })
                .collect::<Result<Vec<_>>>()?;
            let parts = split_indices(&grades, &SplitSpec::new(cfg.detect.split, seed, true)?)?;
            split_log("detection", &ids, &parts, &mut splits);
            let train: Vec<DetectionImage> = parts[0].iter().map(|&i| images[i].clone()).collect();
            for d in &train {
                for side in Side::BOTH {
                    writeln!(trained, "detection,{}_{side}", d.image_id).unwrap();
                }
            }
            let models = train_detectors(&train, &cfg.detect.training(cfg.detect.c, seed))?;
            models.svm.save(out.join("models/detector.svm"))?;
            models.templates.save(out.join("models/templates.txt"))?;

            let mut run = DetectionRun::default();
            for &i in &parts[2] {
                run.add(&images[i], &models, &scan)?;
            }
            let (svm, template) = run.evaluate(&truth)?;

            let mut sweep = Vec::new();
            for &c in &cfg.detect.c_sweep {
                let m = train_detectors(&train, &cfg.detect.training(c, seed))?;
                let mut found = Vec::new();
                for &i in &parts[2] {
                    let (l, r) = detect_svm(&images[i].image, &m.svm, &scan)?;
                    found.extend(keyed(&images[i].image_id, l, r));
                }
                sweep.push((c, evaluate_detections(&truth, &found, 0.0)?));
            }
            let mut sweep_csv = String::from("c,rate_j_eq_1,rate_j_ge_0.5,rate_j_gt_0,mean_jaccard\n");
            for (c, r) in std::iter::once((cfg.detect.c, svm)).chain(sweep.iter().copied()) {
                writeln!(
                    sweep_csv,
                    "{c},{},{},{},{}",
                    r.rate_exact, r.rate_half, r.rate_any, r.mean_jaccard
                )
                .unwrap();
            }
            put(&out.join("reports/detector_sweep.csv"), sweep_csv)?;

            let mut det_csv = String::from("image_id,side,x,y,w,h,score\n");
            for (i, img) in images.iter().enumerate() {
                let (l, r) = detect_svm(&img.image, &models.svm, &scan)?;
                for k in keyed(&img.image_id, l, r) {
                    let b = k.detection.to_original();
                    writeln!(
                        det_csv,
                        "{},{},{},{},{},{},{:.17e}",
                        k.image_id, k.side, b.x, b.y, b.w, b.h, k.detection.score
                    )
                    .unwrap();
                }
                if cfg.extract.source == CropSource::Svm {
                    centers[i] = [l.original_center(), r.original_center()];
                }
            }
            put(&out.join("reports/detections.csv"), det_csv)?;
            put(
                &out.join("reports/detection.txt"),
                format!("[svm]\n{}\n[template]\n{}", svm.to_kv(), template.to_kv()),
            )?;
            Ok(DetectionOutcome { svm, template, sweep })
        })?);
    } else {
        skipped.push("detection".to_string());
    }

    let crop = cfg.extract.crop();
    let set = stage("extract", &mut timing, || -> Result<GradingSet> {
        let mut set = GradingSet::default();
        for (r, c) in manifest.records.iter().zip(&centers) {
            set.push(&r.image_id, r.grade, &load_image(&r.path)?, *c, &crop)?;
        }
        Ok(set)
    })?;

    let (base, pretrain_curves) = stage("pretrain", &mut timing, || {
        let source = source_set(&cfg.pretrain.source(), &crop)?;
        let (net, curves) = pretrain(&source, cfg.pretrain.val_fraction, &cfg.pretrain.train(seed), seed)?;
        save_model(&net, out.join("models/base.cnn"))?;
        put(&out.join("curves/pretrain.csv"), curves.to_csv())?;
        Ok((net, curves))
    })?;
    let best = &pretrain_curves.epochs[pretrain_curves.best_epoch - 1];

    let mut taps = Vec::new();
    if cfg.stages.features {
        taps = stage("features", &mut timing, || -> Result<Vec<TapOutcome>> {
            let parts = split_indices(&grades, &SplitSpec::new(cfg.features.split, seed, true)?)?;
            split_log("features", &ids, &parts, &mut splits);
            let (train, test) = (set.take(&parts[0]), set.take(&parts[2]));
            id_log("features", &train, &mut trained);
            let mut outcomes = Vec::new();
            let mut sweep_csv = String::from("tap,c,accuracy,mean_f1,mse\n");
            for tap in &cfg.features.taps {
                let cs = std::iter::once(cfg.features.c).chain(cfg.features.c_sweep.iter().copied());
                for (k, c) in cs.enumerate() {
                    let g = grade_with_tap(&base, &train, &test, tap, &cfg.features.svm(c, seed))?;
                    let report = class_report_with(&confusion(&g.truth, &g.predictions)?, cfg.report.averaging);
                    if k == 0 {
                        g.model.save(out.join(format!("models/svm_{tap}.txt")))?;
                        put(&out.join(format!("reports/features_{tap}.csv")), report.to_csv())?;
                    }
                    writeln!(sweep_csv, "{tap},{c},{},{},{}", report.accuracy, report.mean_f1, g.mse).unwrap();
                    outcomes.push(TapOutcome {
                        tap: tap.clone(),
                        c,
                        report,
                        mse: g.mse,
                    });
                }
            }
            put(&out.join("reports/features_sweep.csv"), sweep_csv)?;
            Ok(outcomes)
        })?;
    } else {
        skipped.push("features".to_string());
    }

    let mut finetune = None;
    if cfg.stages.finetune {
        finetune = Some(stage("finetune", &mut timing, || -> Result<FinetuneOutcome> {
            let parts = split_indices(&grades, &SplitSpec::new(cfg.finetune.split, seed, true)?)?;
            split_log("finetune", &ids, &parts, &mut splits);
            let mut train = set.take(&parts[0]);
            if cfg.finetune.flips {
                train = augment_flips(&train, Partition::Train)?;
            }
            id_log("finetune", &train, &mut trained);
            let test = set.take(&parts[2]);
            let cmp = compare_losses(
                &base,
                &train,
                &set.take(&parts[1]),
                &test,
                &cfg.finetune.train(seed),
                seed,
            )?;
            save_model(
                &cmp.classification.network,
                out.join("models/finetune_classification.cnn"),
            )?;
            save_model(&cmp.regression.network, out.join("models/finetune_regression.cnn"))?;
            put(
                &out.join("curves/finetune_classification.csv"),
                cmp.classification.curves.to_csv(),
            )?;
            put(
                &out.join("curves/finetune_regression.csv"),
                cmp.regression.curves.to_csv(),
            )?;

            let avg = cfg.report.averaging;
            let cls_grades = cmp.classification_grades();
            let reg_grades = cmp.regression_grades()?;
            let classification = class_report_with(&confusion(&cmp.truth, &cls_grades)?, avg);
            let regression_rounded = class_report_with(&confusion(&cmp.truth, &reg_grades)?, avg);
            put(&out.join("reports/grading_classification.csv"), classification.to_csv())?;
            put(
                &out.join("reports/grading_regression_rounded.csv"),
                regression_rounded.to_csv(),
            )?;
            put(
                &out.join("reports/grading_tables.txt"),
                format!(
                    "classification loss\n{}\nregression loss, rounded\n{}",
                    classification.to_table(),
                    regression_rounded.to_table()
                ),
            )?;
            let mut preds = String::from("sample_id,kl_grade,classification,regression,regression_rounded\n");
            for (i, s) in test.iter().enumerate() {
                writeln!(
                    preds,
                    "{},{},{},{:.17e},{}",
                    s.id, s.grade, cls_grades[i], cmp.regression.predictions[i], reg_grades[i]
                )
                .unwrap();
            }
            put(&out.join("reports/predictions.csv"), preds)?;
            Ok(FinetuneOutcome {
                baseline_grade: cmp.baseline,
                mse_classification: cmp.mse_classification()?,
                mse_regression: cmp.mse_regression()?,
                mse_regression_rounded: cmp.mse_regression_rounded()?,
                mse_baseline: cmp.mse_baseline()?,
                classification,
                regression_rounded,
            })
        })?);
    } else {
        skipped.push("finetune".to_string());
    }

    let report = RunReport {
        images: manifest.len(),
        detection,
        pretrain_best_epoch: pretrain_curves.best_epoch,
        pretrain_val_accuracy: best.val_metric,
        taps,
        finetune,
        skipped,
        timing,
    };
    put(&out.join("reports/splits.csv"), splits)?;
    put(&out.join("reports/training_ids.csv"), trained)?;
    put(&out.join("reports/mse.txt"), report.mse_table(cfg.features.c))?;
    put(&out.join("reports/summary.txt"), report.to_text())?;
    put(&out.join("reports/timing.txt"), report.timing_text())?;
    Ok(report)
}

fn keyed(id: &str, l: crate::detect::Detection, r: crate::detect::Detection) -> [KeyedDetection; 2] {
    [(Side::Left, l), (Side::Right, r)].map(|(side, detection)| KeyedDetection {
        image_id: id.to_string(),
        side,
        detection,
    })
}
