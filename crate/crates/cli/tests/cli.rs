use std::path::Path;
use std::process::{Command, Output};

fn kneeoa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kneeoa"))
        .current_dir(dir)
        .env("RUST_BACKTRACE", "0")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: &str = "seed = 3
[synth]
per_grade = [3, 3, 3, 3, 3]
[detect]
templates_per_grade = 2
c_sweep = []
";

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = stdout(&kneeoa(dir.path(), &["--help"]));
    for cmd in [
        "synth",
        "annotate",
        "train-detector",
        "detect",
        "eval-detect",
        "extract",
        "pretrain",
        "features",
        "train-svm",
        "finetune",
        "evaluate",
        "run",
    ] {
        assert!(
            help.lines().any(|l| l.trim_start().starts_with(cmd)),
            "{cmd} missing from\n{help}"
        );
    }
    for flag in ["--seed", "--config", "--out"] {
        assert!(help.contains(flag));
    }
}

#[test]
fn detector_stages_chain_through_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let base = ["--config", "small.toml", "--out", "r"];
    let run = |extra: &[&str]| kneeoa(dir.path(), &[&base[..], extra].concat());

    let synth = stdout(&run(&["synth"]));
    assert!(synth.contains("15 images"), "{synth}");
    stdout(&run(&["train-detector"]));
    assert!(dir.path().join("r/models/detector.svm").is_file());
    let table = stdout(&run(&["eval-detect"]));
    assert!(table.contains("svm") && table.contains("template"), "{table}");

    let image = dir.path().join("r/data/images/knee-00000.png");
    let found = stdout(&run(&["detect", image.to_str().unwrap()]));
    let lines: Vec<&str> = found.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",left,") && lines[2].contains(",right,"));
    assert!(lines[1].ends_with(|c: char| c.is_ascii_digit()));

    stdout(&run(&["extract"]));
    let index = std::fs::read_to_string(dir.path().join("r/crops/index.csv")).unwrap();
    assert_eq!(index.lines().count(), 31);
}

#[test]
fn evaluate_scores_a_predictions_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("p.csv"),
        "sample_id,kl_grade,prediction\na,0,0.4\nb,2,2.6\nc,4,4\nd,1,1\n",
    )
    .unwrap();
    let out = stdout(&kneeoa(dir.path(), &["evaluate", "p.csv"]));
    // (0.16 + 0.36) / 4 raw, one miss by a full grade after rounding.
    assert!(out.contains("mse = 0.130"), "{out}");
    assert!(out.contains("mse_rounded = 0.250"), "{out}");
    assert!(out.contains("accuracy 0.7500"), "{out}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[detect]\nwindow = 30\n").unwrap();
    let o = kneeoa(dir.path(), &["--config", "bad.toml", "run"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml") && err.contains("window"), "{err}");

    std::fs::write(dir.path().join("p.csv"), "sample_id,kl_grade,prediction\na,7,1\n").unwrap();
    let o = kneeoa(dir.path(), &["evaluate", "p.csv"]);
    assert!(!o.status.success());

    let o = kneeoa(dir.path(), &["--out", "empty", "pretrain", "--help"]);
    assert!(o.status.success());
    let o = kneeoa(dir.path(), &["--out", "empty", "features"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain first"));
}
