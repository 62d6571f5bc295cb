//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if
//! any criterion fails.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::Instant;

use multer_core::data::{synth_textures, Pipeline, SynthSpec};
use multer_core::encoding::Codebook;
use multer_core::gradcheck::{self, CheckOptions, TOLERANCE};
use multer_core::network::{ablation_schemes, multer_features, ABLATION_SCHEMES};
use multer_core::params::init_rng;
use multer_core::training::train;
use multer_core::{LevelSet, Mode, Model, MulterConfig, MulterParams, Tape, Tensor, TrainingConfig};
use rand::Rng;

const BIN: &str = env!("CARGO_BIN_EXE_multer");
const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let reports = match gradcheck::run_all(gradcheck::DEFAULT_SEEDS, &CheckOptions::default()) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    let cases: usize = reports.iter().map(|r| r.cases.len()).sum();
    let skipped: usize = reports.iter().flat_map(|r| &r.cases).map(|c| c.outcome.skipped).sum();
    let per_suite: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {:.1e}", r.suite, r.max_rel_err()))
        .collect();
    verdict(
        worst < TOLERANCE && secs < 60.0 && reports.iter().all(|r| r.passed()),
        format!(
            "{cases} cases x {} seeds, max rel err {worst:.2e} < {TOLERANCE:e} ({}), {skipped} coords skipped, {secs:.1} s < 60 s",
            gradcheck::DEFAULT_SEEDS,
            per_suite.join(", ")
        ),
    )
}

fn assignment_normalization() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..1000u64 {
        let mut rng = init_rng(seed, "acceptance/lem-input");
        let (d, k, h, w) = (
            rng.gen_range(1..32),
            rng.gen_range(1..16),
            rng.gen_range(1..8),
            rng.gen_range(1..8),
        );
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let fmap = Tensor::uniform(&[1, d, h, w], -scale, scale, &mut rng);
        // Descriptors as the encoding module sees them: channels last.
        let mut tape = Tape::no_grad();
        let v = tape.constant(fmap);
        let x = tape.channels_last(v).unwrap();
        let desc = tape.value(x).clone();
        let book = Codebook::init(k, d, seed, "lem");
        let a = book.assignments(&desc).unwrap();
        for row in a.data().chunks(k) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut single_ok = true;
    for seed in 0..100u64 {
        let mut rng = init_rng(seed, "acceptance/k1");
        let d = rng.gen_range(1..16);
        let x = Tensor::uniform(&[2, 9, d], -100.0, 100.0, &mut rng);
        let a = Codebook::init(1, d, seed, "lem").assignments(&x).unwrap();
        single_ok &= a.data().iter().all(|&v| v == 1.0);
    }

    let mut hard_ok = 0;
    let mut rng = init_rng(0, "acceptance/hard");
    let mut instances = 0;
    while instances < 100 {
        let (k, d) = (rng.gen_range(2..9), rng.gen_range(1..8));
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dist: Vec<f64> = c
            .chunks(d)
            .map(|ck| x.iter().zip(ck).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let best = dist.iter().copied().fold(f64::INFINITY, f64::min);
        let runner_up = dist
            .iter()
            .copied()
            .filter(|&v| v != best)
            .fold(f64::INFINITY, f64::min);
        if dist.iter().filter(|&&v| v == best).count() != 1 || runner_up - best < 1e-4 {
            continue;
        }
        instances += 1;
        let nearest = dist.iter().position(|&v| v == best).unwrap();
        let book = Codebook::new(Tensor::new(&[k, d], c).unwrap(), Tensor::full(&[k], 1e6)).unwrap();
        let a = book.assignments(&Tensor::new(&[1, 1, d], x).unwrap()).unwrap();
        let argmax = (0..k).max_by(|&i, &j| a.data()[i].total_cmp(&a.data()[j])).unwrap();
        if argmax == nearest && (a.data()[nearest] - 1.0).abs() < 1e-12 {
            hard_ok += 1;
        }
    }
    verdict(
        worst <= 1e-10 && single_ok && hard_ok == 100,
        format!(
            "1000 inputs: max |row sum - 1| = {worst:.1e}; K=1 weights exactly 1: {single_ok}; hard limit matches nearest codeword {hard_ok}/100"
        ),
    )
}

fn dimension_trace() -> Verdict {
    let start = Instant::now();
    let t = match MulterConfig::full(23).trace(224, 224) {
        Ok(t) => t,
        Err(e) => return verdict(false, format!("error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let stages_ok = t.stages == [(64, 56, 56), (128, 28, 28), (256, 14, 14), (512, 7, 7)];
    let lem_ok = t.lems.len() == 4 && t.lems.iter().all(|l| l.bilinear == 4096 && l.output == 128);
    let stages: Vec<String> = t.stages.iter().map(|(d, h, w)| format!("{h}x{w}x{d}")).collect();
    verdict(
        stages_ok && lem_ok && t.classifier_in == 512 && secs < 1.0,
        format!(
            "stages {}; bilinear {}; output {}; classifier in {}; {:.1} ms",
            stages.join(" / "),
            t.lems[0].bilinear,
            t.lems[0].output,
            t.classifier_in,
            secs * 1e3
        ),
    )
}

fn fixed_length() -> Verdict {
    let cfg = MulterConfig::full(23);
    let params = MulterParams::init(&cfg, 0).unwrap();
    let mut ok = true;
    let mut seen = Vec::new();
    for size in [224, 256, 320] {
        for levels in ablation_schemes() {
            let c = MulterConfig { levels, ..cfg.clone() };
            ok &= c.trace(size, size).map(|t| t.classifier_in).ok() == Some(levels.len() * c.out_dim);
        }
        // Executed with the full-size network, all four levels.
        let image = Tensor::uniform(
            &[1, 3, size, size],
            0.0,
            1.0,
            &mut init_rng(size as u64, "acceptance/image"),
        );
        let mut tape = Tape::no_grad();
        let x = tape.constant(image);
        let shape = multer_features(&mut tape, x, &params, Mode::Eval)
            .map(|f| tape.shape(f).to_vec())
            .ok();
        ok &= shape.as_deref() == Some(&[1, 4 * 128][..]);
        seen.push(format!("{size}: {:?}", shape.unwrap_or_default()));
    }
    verdict(
        ok,
        format!("executed features {}; traced |L|*C for all 10 schemes", seen.join(", ")),
    )
}

fn lr_schedule() -> Verdict {
    let cfg = TrainingConfig::default();
    let ok = (0..30).all(|e| {
        let want: f64 = [0.01, 0.001, 0.0001][e / 10];
        cfg.lr_at(e).to_bits() == want.to_bits()
    });
    verdict(
        ok,
        format!(
            "epochs 0, 10, 20 -> {:e}, {:e}, {:e} (bit-exact over 0..30)",
            cfg.lr_at(0),
            cfg.lr_at(10),
            cfg.lr_at(20)
        ),
    )
}

/// Final test accuracy of one desk-scale run, as `train` would produce it.
fn desk_run(levels: LevelSet, seed: u64) -> f64 {
    let data = synth_textures(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = MulterConfig {
        levels,
        ..MulterConfig::desk(data.classes())
    };
    let mut model = Model::new(MulterParams::init(&cfg, seed).unwrap(), data.class_names.clone()).unwrap();
    let tc = TrainingConfig {
        batch_size: 16,
        seed,
        ..TrainingConfig::default()
    };
    let log = train(&mut model, &data, &tc, &Pipeline::desk()).unwrap();
    log.last().unwrap().eval_acc
}

fn end_to_end(full: &[f64], secs: f64) -> Verdict {
    let hits = full.iter().filter(|&&a| a >= 0.9).count();
    let accs: Vec<String> = full.iter().map(|a| format!("{a:.4}")).collect();
    verdict(
        hits >= 2 && secs < 600.0,
        format!(
            "L=1,2,3,4, K=4, C=32, 30 epochs, seeds {SEEDS:?}: accuracy [{}], {hits}/3 >= 0.90, {:.0} s per run",
            accs.join(", "),
            secs / SEEDS.len() as f64
        ),
    )
}

fn multi_level_trend(full: &[f64]) -> Verdict {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let full_mean = mean(full);
    let mut singles = Vec::new();
    for level in 1..=4u8 {
        let accs: Vec<f64> = SEEDS
            .iter()
            .map(|&s| desk_run(LevelSet::new(&[level]).unwrap(), s))
            .collect();
        singles.push((level, mean(&accs)));
    }
    let (best_level, best) = singles
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });

    // Report schema, checked through the CLI on a tiny configuration.
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args([
            "ablate",
            "--epochs",
            "1",
            "--train-per-class",
            "3",
            "--test-per-class",
            "2",
            "--image-size",
            "32",
        ])
        .args(["--k", "2", "--c", "4", "--branch", "4", "--batch", "4", "--out"])
        .arg(dir.path())
        .env_remove("MULTER_SEED")
        .output()
        .unwrap();
    let report = fs::read_to_string(dir.path().join("ablation.csv")).unwrap_or_default();
    let labels: Vec<String> = csv::Reader::from_reader(report.as_bytes())
        .records()
        .filter_map(|r| r.ok().map(|r| r[0].to_string()))
        .collect();
    let want: Vec<String> = ABLATION_SCHEMES
        .iter()
        .map(|l| LevelSet::new(l).unwrap().to_string())
        .collect();
    let schema_ok = out.status.success() && labels == want;

    let single_txt: Vec<String> = singles.iter().map(|(l, a)| format!("L={l} {a:.4}")).collect();
    let tie = if full_mean == best { " (tie)" } else { "" };
    verdict(
        full_mean >= best && schema_ok,
        format!(
            "mean over 3 seeds: L=1,2,3,4 {full_mean:.4} vs best single L={best_level} {best:.4}{tie} [{}]; report rows {} in order: {schema_ok}",
            single_txt.join(", "),
            labels.len()
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(BIN)
            .args([
                "train",
                "--epochs",
                "3",
                "--train-per-class",
                "8",
                "--test-per-class",
                "4",
                "--seed",
                "7",
                "--out",
            ])
            .arg(&out)
            .env_remove("MULTER_SEED")
            .output()
            .unwrap()
            .status;
        (
            status.success(),
            fs::read(out.join("metrics.csv")).unwrap_or_default(),
            fs::read(out.join("model.bin")).unwrap_or_default(),
        )
    };
    let (ok_a, csv_a, model_a) = run("a");
    let (ok_b, csv_b, model_b) = run("b");
    let same = ok_a && ok_b && !csv_a.is_empty() && csv_a == csv_b && !model_a.is_empty() && model_a == model_b;
    verdict(
        same,
        format!(
            "two `train --seed 7` runs: metrics.csv {} bytes identical: {}, model.bin {} bytes identical: {}",
            csv_a.len(),
            csv_a == csv_b,
            model_a.len(),
            model_a == model_b
        ),
    )
}

fn report(id: u32, name: &str, v: &Verdict) {
    println!("[{}] {id} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
}

fn main() -> ExitCode {
    // libtest flags such as `--nocapture` or a filter are accepted and ignored.
    println!("running acceptance criteria");
    let mut all = true;
    let mut check = |id, name: &str, v: Verdict| {
        report(id, name, &v);
        all &= v.passed;
    };
    check(1, "gradient suite", gradient_suite());
    check(2, "assignment normalization", assignment_normalization());
    check(3, "architecture dimension trace", dimension_trace());
    check(4, "fixed-length features", fixed_length());
    check(5, "learning-rate schedule", lr_schedule());

    let start = Instant::now();
    let full: Vec<f64> = SEEDS.iter().map(|&s| desk_run(LevelSet::all(), s)).collect();
    let secs = start.elapsed().as_secs_f64();
    check(6, "end-to-end learning", end_to_end(&full, secs));
    check(7, "multi-level trend", multi_level_trend(&full));
    check(8, "determinism", determinism());

    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
