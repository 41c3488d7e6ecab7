//! `kneeoa` command-line front end.
//!
//! Stage commands read and write the run directory given by `--out`, so they
//! can be chained: `synth`, `train-detector`, `extract`, `pretrain`,
//! `features`, `train-svm`, `finetune`, `evaluate`. `run` does all of it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use kneeoa::detect::{detect_svm, preprocess, Side, TemplateSet};
use kneeoa::imaging::{load_image, save_png};
use kneeoa::metrics::{class_report_with, confusion, mse, round_to_grade, Averaging};
use kneeoa::minicnn::{finetune, load_model, predict_all, replace_head, save_model, HeadKind, LossKind, Network};
use kneeoa::pipeline::{
    augment_flips, load_dataset, load_manifest, pretrain, run_experiment, serve_annotation, source_set, split_indices,
    synth_generate, tap_features, tensors, train_detectors, train_feature_svm, AnnotationService, DatasetManifest,
    DetectionImage, DetectionRun, DetectorModels, GradingSet, JointSample, Partition, RunConfig, SplitSpec,
};
use kneeoa::svm::LinearSvmModel;

#[derive(Parser)]
#[command(name = "kneeoa", version, about = "Knee osteoarthritis severity toolkit")]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic radiograph corpus into <out>/data.
    Synth,
    /// Serve the annotation HTTP API.
    Annotate {
        #[arg(long)]
        labels: PathBuf,
        /// Existing annotations to start from; also the file that is rewritten.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        /// SVM detector used to prefill boxes.
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Train the SVM detector and build the template set on the detection training split.
    TrainDetector,
    /// Print SVM detections for radiographs as CSV.
    Detect {
        images: Vec<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare both detectors on the detection test split.
    EvalDetect,
    /// Cut joint regions at annotated or detected centers into <out>/crops.
    Extract {
        /// Use centers from this SVM detector instead of the annotations.
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// Train the base network on the source task.
    Pretrain,
    /// Write feature vectors of every crop for each tap.
    Features {
        #[arg(long = "tap")]
        taps: Vec<String>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train a one-vs-rest SVM on one tap's features and grade its test split.
    TrainSvm {
        #[arg(long)]
        tap: String,
        #[arg(long)]
        c: Option<f64>,
    },
    /// Replace the head of the base network and fine-tune it.
    Finetune {
        #[arg(long, value_enum)]
        loss: Loss,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score a predictions CSV with `kl_grade` and `prediction` columns.
    Evaluate {
        predictions: PathBuf,
        #[arg(long, value_enum)]
        averaging: Option<Avg>,
    },
    /// Run the whole experiment.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Classification,
    Regression,
}

#[derive(Clone, Copy, ValueEnum)]
enum Avg {
    Macro,
    Weighted,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    cfg.validate()?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth => synth(&cfg, out),
        Command::Annotate {
            labels,
            annotations,
            images,
            detector,
            port,
        } => annotate(&cfg, &labels, &annotations, images, detector, port),
        Command::TrainDetector => train_detector(&cfg, out),
        Command::Detect { images, model } => detect(&cfg, out, &images, model),
        Command::EvalDetect => eval_detect(&cfg, out),
        Command::Extract { detector } => extract(&cfg, out, detector),
        Command::Pretrain => pretrain_cmd(&cfg, out),
        Command::Features { taps, model } => features(&cfg, out, taps, model),
        Command::TrainSvm { tap, c } => train_svm(&cfg, out, &tap, c),
        Command::Finetune { loss, model } => finetune_cmd(&cfg, out, loss, model),
        Command::Evaluate { predictions, averaging } => evaluate(&cfg, &predictions, averaging),
        Command::Run => run(&cfg, out),
    }
}

/// `out/rel` with its parent directory created.
fn artifact(out: &Path, rel: &str) -> Result<PathBuf> {
    let path = out.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(path)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// The configured dataset, else a corpus already generated under <out>/data,
/// else a freshly generated one.
fn dataset(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let data = out.join("data");
    if cfg.data.labels.is_none() && data.join("labels.csv").is_file() {
        let ann = data.join("annotations.csv");
        return Ok(load_manifest(&data.join("labels.csv"), Some(&ann), &data)?);
    }
    Ok(load_dataset(cfg, out)?)
}

fn parts(grades: &[u8], split: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    Ok(split_indices(grades, &SplitSpec::new(split, seed, true)?)?)
}

fn detection_images(cfg: &RunConfig, m: &DatasetManifest, idx: &[usize]) -> Result<Vec<DetectionImage>> {
    let pre = cfg.detect.preprocess();
    idx.iter()
        .map(|&i| {
            let r = &m.records[i];
            let anns = Side::BOTH.map(|s| r.annotation(s).unwrap().clone()).to_vec();
            Ok(DetectionImage::new(
                &r.image_id,
                r.grade,
                &load_image(&r.path)?,
                anns,
                &pre,
            )?)
        })
        .collect()
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let m = synth_generate(&cfg.synth, &out.join("data"))?;
    println!("{} images written to {}", m.len(), out.join("data").display());
    println!("{}", kneeoa::pipeline::grade_counts_text(&m.counts_per_grade()));
    Ok(())
}

fn annotate(
    cfg: &RunConfig,
    labels: &Path,
    annotations: &Path,
    images: Option<PathBuf>,
    detector: Option<PathBuf>,
    port: u16,
) -> Result<()> {
    let dir = images.unwrap_or_else(|| labels.parent().unwrap_or(Path::new(".")).to_path_buf());
    let existing = annotations.is_file().then_some(annotations);
    let manifest = load_manifest(labels, existing, &dir)?;
    let mut service = AnnotationService::new(manifest, annotations, cfg.detect.scale);
    if let Some(p) = detector {
        service = service.with_detector(LinearSvmModel::load(p)?, cfg.detect.preprocess(), cfg.detect.scan());
    }
    eprintln!("serving annotations on http://127.0.0.1:{port}");
    Ok(serve_annotation(service, port)?)
}

fn train_detector(cfg: &RunConfig, out: &Path) -> Result<()> {
    let m = dataset(cfg, out)?;
    let [train, _, _] = parts(&m.grades(), cfg.detect.split, cfg.seed)?;
    let images = detection_images(cfg, &m, &train)?;
    let models = train_detectors(&images, &cfg.detect.training(cfg.detect.c, cfg.seed))?;
    models.svm.save(artifact(out, "models/detector.svm")?)?;
    models.templates.save(artifact(out, "models/templates.txt")?)?;
    println!(
        "trained on {} images; {} templates; models in {}",
        images.len(),
        models.templates.len(),
        out.join("models").display()
    );
    Ok(())
}

fn detect(cfg: &RunConfig, out: &Path, images: &[PathBuf], model: Option<PathBuf>) -> Result<()> {
    if images.is_empty() {
        bail!("no images given");
    }
    let model = LinearSvmModel::load(model.unwrap_or_else(|| out.join("models/detector.svm")))?;
    println!("path,side,x,y,w,h,score");
    for p in images {
        let pre = preprocess(&load_image(p)?, &cfg.detect.preprocess())?;
        let (l, r) = detect_svm(&pre, &model, &cfg.detect.scan())?;
        for (side, d) in [(Side::Left, l), (Side::Right, r)] {
            let b = d.to_original();
            println!("{},{side},{},{},{},{},{:.6}", p.display(), b.x, b.y, b.w, b.h, d.score);
        }
    }
    Ok(())
}

fn eval_detect(cfg: &RunConfig, out: &Path) -> Result<()> {
    let m = dataset(cfg, out)?;
    let models = DetectorModels {
        svm: LinearSvmModel::load(out.join("models/detector.svm"))?,
        templates: TemplateSet::load(out.join("models/templates.txt"))?,
    };
    let [_, _, test] = parts(&m.grades(), cfg.detect.split, cfg.seed)?;
    let mut run = DetectionRun::default();
    for img in detection_images(cfg, &m, &test)? {
        run.add(&img, &models, &cfg.detect.scan())?;
    }
    let (svm, template) = run.evaluate(&m.annotations())?;
    let table = kneeoa::detect::DetectionReport::table(&[("svm", &svm), ("template", &template)]);
    write(
        &out.join("reports/detection.txt"),
        format!("[svm]\n{}\n[template]\n{}", svm.to_kv(), template.to_kv()),
    )?;
    print!("{table}");
    Ok(())
}

fn extract(cfg: &RunConfig, out: &Path, detector: Option<PathBuf>) -> Result<()> {
    let m = dataset(cfg, out)?;
    let model = detector.map(LinearSvmModel::load).transpose()?;
    let crop = cfg.extract.crop();
    let dir = out.join("crops");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut index = String::from("sample_id,image_id,kl_grade,path\n");
    for r in &m.records {
        let img = load_image(&r.path)?;
        let centers = match &model {
            Some(model) => {
                let (l, rt) = detect_svm(&preprocess(&img, &cfg.detect.preprocess())?, model, &cfg.detect.scan())?;
                [l.original_center(), rt.original_center()]
            }
            None => Side::BOTH.map(|s| r.annotation(s).unwrap().bbox.center()),
        };
        let mut set = GradingSet::default();
        set.push(&r.image_id, r.grade, &img, centers, &crop)?;
        for s in &set.joints[0] {
            let name = format!("{}.png", s.id);
            save_png(&s.image, dir.join(&name))?;
            writeln!(index, "{},{},{},{name}", s.id, r.image_id, r.grade)?;
        }
    }
    write(&dir.join("index.csv"), index)?;
    println!("{} joint crops in {}", 2 * m.len(), dir.display());
    Ok(())
}

/// Crops written by `extract`, grouped per image in file order.
fn load_crops(out: &Path) -> Result<GradingSet> {
    let dir = out.join("crops");
    let path = dir.join("index.csv");
    let mut rd =
        csv::Reader::from_path(&path).with_context(|| format!("reading {}; run extract first", path.display()))?;
    let mut set = GradingSet::default();
    let mut pending: Vec<JointSample> = Vec::new();
    for row in rd.records() {
        let row = row?;
        let (id, image_id, grade, file) = (&row[0], &row[1], row[2].parse::<u8>()?, &row[3]);
        pending.push(JointSample {
            id: id.to_string(),
            image: load_image(dir.join(file))?,
            grade,
        });
        if pending.len() == 2 {
            let [l, r]: [JointSample; 2] = std::mem::take(&mut pending).try_into().unwrap();
            set.image_ids.push(image_id.to_string());
            set.grades.push(grade);
            set.joints.push([l, r]);
        }
    }
    if !pending.is_empty() || set.is_empty() {
        bail!("{} must list both joints of every image", path.display());
    }
    Ok(set)
}

fn base_model(out: &Path, model: Option<PathBuf>) -> Result<Network> {
    let p = model.unwrap_or_else(|| out.join("models/base.cnn"));
    load_model(&p).with_context(|| format!("loading {}; run pretrain first", p.display()))
}

fn pretrain_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let source = source_set(&cfg.pretrain.source(), &cfg.extract.crop())?;
    let (net, curves) = pretrain(
        &source,
        cfg.pretrain.val_fraction,
        &cfg.pretrain.train(cfg.seed),
        cfg.seed,
    )?;
    save_model(&net, artifact(out, "models/base.cnn")?)?;
    write(&out.join("curves/pretrain.csv"), curves.to_csv())?;
    let best = &curves.epochs[curves.best_epoch - 1];
    println!(
        "best epoch {} with validation accuracy {:.3}",
        curves.best_epoch, best.val_metric
    );
    Ok(())
}

fn features(cfg: &RunConfig, out: &Path, taps: Vec<String>, model: Option<PathBuf>) -> Result<()> {
    let net = base_model(out, model)?;
    let set = load_crops(out)?;
    let samples: Vec<JointSample> = set.joints.iter().flatten().cloned().collect();
    let taps = if taps.is_empty() {
        cfg.features.taps.clone()
    } else {
        taps
    };
    for tap in &taps {
        let xs = tap_features(&net, &samples, tap)?;
        let mut text = String::from("sample_id,image_id,kl_grade,features\n");
        for (k, (s, x)) in samples.iter().zip(&xs).enumerate() {
            let v: Vec<String> = x.iter().map(f64::to_string).collect();
            writeln!(text, "{},{},{},{}", s.id, set.image_ids[k / 2], s.grade, v.join(" "))?;
        }
        let path = out.join(format!("features/{tap}.csv"));
        write(&path, text)?;
        println!(
            "{tap}: {} vectors of {} values in {}",
            xs.len(),
            xs.first().map_or(0, Vec::len),
            path.display()
        );
    }
    Ok(())
}

struct FeatureRows {
    ids: Vec<String>,
    images: Vec<String>,
    grades: Vec<u8>,
    xs: Vec<Vec<f64>>,
}

fn read_features(path: &Path) -> Result<FeatureRows> {
    let mut rd =
        csv::Reader::from_path(path).with_context(|| format!("reading {}; run features first", path.display()))?;
    let mut f = FeatureRows {
        ids: Vec::new(),
        images: Vec::new(),
        grades: Vec::new(),
        xs: Vec::new(),
    };
    for row in rd.records() {
        let row = row?;
        f.ids.push(row[0].to_string());
        f.images.push(row[1].to_string());
        f.grades.push(row[2].parse()?);
        f.xs.push(row[3].split(' ').map(str::parse).collect::<Result<_, _>>()?);
    }
    Ok(f)
}

fn predictions_csv(ids: &[String], truth: &[u8], preds: &[f64]) -> String {
    let mut s = String::from("sample_id,kl_grade,prediction\n");
    for ((id, t), p) in ids.iter().zip(truth).zip(preds) {
        writeln!(s, "{id},{t},{p}").unwrap();
    }
    s
}

fn train_svm(cfg: &RunConfig, out: &Path, tap: &str, c: Option<f64>) -> Result<()> {
    let f = read_features(&out.join(format!("features/{tap}.csv")))?;
    let mut image_index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut grades: Vec<u8> = Vec::new();
    let row_image: Vec<usize> = f
        .images
        .iter()
        .zip(&f.grades)
        .map(|(img, g)| {
            *image_index.entry(img).or_insert_with(|| {
                grades.push(*g);
                grades.len() - 1
            })
        })
        .collect();
    let [train, _, test] = parts(&grades, cfg.features.split, cfg.seed)?;
    let rows_of = |idx: &[usize]| -> Vec<usize> {
        idx.iter()
            .flat_map(|&i| {
                row_image
                    .iter()
                    .enumerate()
                    .filter(move |(_, &m)| m == i)
                    .map(|(r, _)| r)
            })
            .collect()
    };
    let (train, test) = (rows_of(&train), rows_of(&test));
    let xs: Vec<Vec<f64>> = train.iter().map(|&r| f.xs[r].clone()).collect();
    let ys: Vec<u8> = train.iter().map(|&r| f.grades[r]).collect();
    let model = train_feature_svm(&xs, &ys, &cfg.features.svm(c.unwrap_or(cfg.features.c), cfg.seed))?;
    model.save(artifact(out, &format!("models/svm_{tap}.txt"))?)?;
    let truth: Vec<u8> = test.iter().map(|&r| f.grades[r]).collect();
    let preds = test
        .iter()
        .map(|&r| model.predict_grade(&f.xs[r]).map(f64::from))
        .collect::<kneeoa::Result<Vec<f64>>>()?;
    let ids: Vec<String> = test.iter().map(|&r| f.ids[r].clone()).collect();
    let path = out.join(format!("reports/svm_{tap}_predictions.csv"));
    write(&path, predictions_csv(&ids, &truth, &preds))?;
    print!("{}", score(&truth, &preds, cfg.report.averaging)?);
    Ok(())
}

fn finetune_cmd(cfg: &RunConfig, out: &Path, loss: Loss, model: Option<PathBuf>) -> Result<()> {
    let base = base_model(out, model)?;
    let set = load_crops(out)?;
    let [tr, va, te] = parts(&set.grades, cfg.finetune.split, cfg.seed)?;
    let mut train = set.take(&tr);
    if cfg.finetune.flips {
        train = augment_flips(&train, Partition::Train)?;
    }
    let (head, kind, name) = match loss {
        Loss::Classification => (HeadKind::Softmax5, LossKind::SoftmaxCrossEntropy, "classification"),
        Loss::Regression => (HeadKind::Regression1, LossKind::Euclidean, "regression"),
    };
    let net = replace_head(&base, head, cfg.seed)?;
    let (net, curves) = finetune(
        &net,
        &tensors(&train),
        &tensors(&set.take(&va)),
        kind,
        &cfg.finetune.train(cfg.seed),
    )?;
    save_model(&net, artifact(out, &format!("models/finetune_{name}.cnn"))?)?;
    write(&out.join(format!("curves/finetune_{name}.csv")), curves.to_csv())?;
    let test = set.take(&te);
    let preds = predict_all(&net, &tensors(&test))?;
    let truth: Vec<u8> = test.iter().map(|s| s.grade).collect();
    let ids: Vec<String> = test.iter().map(|s| s.id.clone()).collect();
    write(
        &out.join(format!("reports/finetune_{name}_predictions.csv")),
        predictions_csv(&ids, &truth, &preds),
    )?;
    println!("best epoch {}", curves.best_epoch);
    print!("{}", score(&truth, &preds, cfg.report.averaging)?);
    Ok(())
}

/// Grade table of rounded predictions plus MSE of the raw and rounded values.
fn score(truth: &[u8], preds: &[f64], averaging: Averaging) -> Result<String> {
    let rounded = preds
        .iter()
        .map(|p| round_to_grade(*p))
        .collect::<kneeoa::Result<Vec<u8>>>()?;
    let report = class_report_with(&confusion(truth, &rounded)?, averaging);
    let as_f64: Vec<f64> = rounded.iter().map(|&g| f64::from(g)).collect();
    Ok(format!(
        "{}mse = {:.3}\nmse_rounded = {:.3}\n",
        report.to_table(),
        mse(truth, preds)?,
        mse(truth, &as_f64)?
    ))
}

fn evaluate(cfg: &RunConfig, path: &Path, averaging: Option<Avg>) -> Result<()> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rd.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{} has no {name} column", path.display()))
    };
    let (t, p) = (col("kl_grade")?, col("prediction")?);
    let mut truth = Vec::new();
    let mut preds = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let line = i + 2;
        truth.push(row[t].parse::<u8>().with_context(|| format!("row {line}: bad grade"))?);
        preds.push(
            row[p]
                .parse::<f64>()
                .with_context(|| format!("row {line}: bad prediction"))?,
        );
    }
    let averaging = match averaging {
        Some(Avg::Macro) => Averaging::Macro,
        Some(Avg::Weighted) => Averaging::Weighted,
        None => cfg.report.averaging,
    };
    print!("{}", score(&truth, &preds, averaging)?);
    Ok(())
}

fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let report = run_experiment(cfg, out)?;
    print!("{}", report.mse_table(cfg.features.c));
    print!("{}", report.timing_text());
    println!("artifacts in {}", out.display());
    Ok(())
}
