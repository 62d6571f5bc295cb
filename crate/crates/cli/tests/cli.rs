use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use multer_core::data::{synth_textures, SynthSpec};
use multer_core::model_io::load_model;
use multer_core::MulterParams;

const BIN: &str = env!("CARGO_BIN_EXE_multer");

/// Flags for a run that finishes in well under a second.
const TINY: [&str; 16] = [
    "--train-per-class",
    "4",
    "--test-per-class",
    "2",
    "--image-size",
    "32",
    "--k",
    "2",
    "--c",
    "4",
    "--branch",
    "4",
    "--batch",
    "4",
    "--seed",
    "3",
];

fn multer(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("MULTER_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend(TINY);
    args.extend(extra);
    multer(&args)
}

#[test]
fn out_of_range_level_is_a_usage_error() {
    let o = multer(&["train", "--levels", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("level 5"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(multer(&["train", "--nope"]).status.code(), Some(2));
    assert_eq!(multer(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs=2\nwidth=9\n").unwrap();
    let o = multer(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("width"));
}

#[test]
fn zero_epochs_writes_the_initial_model_and_still_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), &["--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.trim(), "epoch,lr,train_loss,train_acc,eval_acc");
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("final eval accuracy: "), "{summary}");
    let model = load_model(&dir.path().join("model.bin")).unwrap();
    assert_eq!(model.params, MulterParams::init(model.config(), 3).unwrap());
}

#[test]
fn eval_reproduces_the_final_training_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), &["--epochs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let eval_acc: f64 = last.rsplit(',').next().unwrap().parse().unwrap();

    let model = dir.path().join("model.bin");
    let o = multer(&["eval", "--model", model.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), format!("accuracy={eval_acc:.4}"));
}

#[test]
fn eval_of_missing_model_names_the_path() {
    let o = multer(&["eval", "--model", "/nonexistent/model.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/model.bin"));
}

#[test]
fn eval_on_data_with_other_classes_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_tiny(&run, &["--epochs", "0"]).status.success());

    let data = synth_textures(&SynthSpec {
        classes: 2,
        train_per_class: 2,
        test_per_class: 1,
        size: 32,
        ..SynthSpec::default()
    })
    .unwrap();
    let root = dir.path().join("images");
    data.export(&root).unwrap();
    let model = run.join("model.bin");
    let o = multer(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        root.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("classes"), "{}", stderr(&o));
}

#[test]
fn training_on_a_missing_folder_is_a_data_error() {
    let o = multer(&["train", "--data", "/nonexistent/images"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/images"));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut args: Vec<&str> = vec!["train", "--epochs", "1", "--out", a.to_str().unwrap()];
    args.extend(&TINY[..14]);
    let o = Command::new(BIN).args(&args).env("MULTER_SEED", "3").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(train_tiny(&b, &["--epochs", "1"]).status.success());
    assert_eq!(
        fs::read(a.join("model.bin")).unwrap(),
        fs::read(b.join("model.bin")).unwrap()
    );
}

#[test]
fn ablation_report_lists_the_ten_schemes_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "ablate",
        "--epochs",
        "1",
        "--seeds",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ];
    args.extend(TINY);
    let o = multer(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(stdout(&o), report);
    let mut reader = csv::Reader::from_reader(report.as_bytes());
    assert_eq!(
        reader.headers().unwrap(),
        vec!["scheme", "accuracy", "seed_3", "seed_4"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let schemes: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(
        schemes,
        [
            "L=1",
            "L=2",
            "L=3",
            "L=4",
            "L=1,2",
            "L=3,4",
            "L=1,4",
            "L=1,2,3",
            "L=2,3,4",
            "L=1,2,3,4"
        ]
    );
    assert!(report.contains("\"L=1,4\""));
    for r in &rows {
        let mean: f64 = r[1].parse().unwrap();
        let per_seed: Vec<f64> = [&r[2], &r[3]].iter().map(|v| v.parse().unwrap()).collect();
        assert!((mean - (per_seed[0] + per_seed[1]) / 2.0).abs() <= 1e-4);
    }
}

#[test]
fn single_seed_ablation_has_no_seed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--epochs", "1", "--out", dir.path().to_str().unwrap()];
    args.extend(TINY);
    let o = multer(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("scheme,accuracy\n"));
    assert_eq!(stdout(&o).lines().count(), 11);
}

#[test]
fn gradcheck_passes_and_catches_a_wrong_rule() {
    let o = multer(&["gradcheck", "--suite", "ops", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("ops"));

    let o = multer(&["gradcheck", "--suite", "ops", "--seeds", "1", "--corrupt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));

    assert_eq!(multer(&["gradcheck", "--suite", "nope"]).status.code(), Some(2));
}
