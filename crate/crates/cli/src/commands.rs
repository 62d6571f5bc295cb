use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use multer_core::data::{load_image_dir, synth_textures, Dataset, Pipeline, SynthSpec};
use multer_core::gradcheck::{self, CheckOptions, SuiteReport, TOLERANCE};
use multer_core::model_io::{load_model, save_model};
use multer_core::network::ablation_schemes;
use multer_core::training::{evaluate, train as train_model, write_metrics_csv, EpochMetrics};
use multer_core::{Error, Model, MulterConfig, MulterParams, TrainingConfig};

use crate::config::{desk_pipeline, DataSource, RunArgs, RunConfig};
use crate::{AblateArgs, EvalArgs, GradcheckArgs};

pub const MODEL_FILE: &str = "model.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const ABLATION_FILE: &str = "ablation.csv";

const VERIFICATION_FAILURE: u8 = 1;
const USAGE_FAILURE: u8 = 2;

/// Numeric failures (divergence) count as verification failures; every
/// other error is a usage, configuration or data problem.
pub fn exit_code(err: &anyhow::Error) -> ExitCode {
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric(_)) => ExitCode::from(VERIFICATION_FAILURE),
        _ => ExitCode::from(USAGE_FAILURE),
    }
}

fn load_data(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synth(spec) => Ok(synth_textures(spec)?),
        DataSource::Dir(root) => Ok(load_image_dir(root)?.load_images()?),
    }
}

/// Data recipe and preprocessing, stored in the model header so `eval` can
/// rebuild the same test views.
fn recipe_meta(cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    match &cfg.data {
        DataSource::Synth(s) => {
            meta.insert("data".into(), "synth".into());
            meta.insert("synth.classes".into(), s.classes.to_string());
            meta.insert("synth.train_per_class".into(), s.train_per_class.to_string());
            meta.insert("synth.test_per_class".into(), s.test_per_class.to_string());
            meta.insert("synth.size".into(), s.size.to_string());
            meta.insert("synth.seed".into(), s.seed.to_string());
            meta.insert("synth.jitter".into(), format!("{:?}", s.jitter));
            meta.insert("synth.noise".into(), format!("{:?}", s.noise));
        }
        DataSource::Dir(root) => {
            meta.insert("data".into(), root.display().to_string());
        }
    }
    meta.insert("pipeline.resize".into(), cfg.pipeline.resize.to_string());
    meta.insert("pipeline.crop".into(), cfg.pipeline.crop.to_string());
    meta.insert("pipeline.flip_prob".into(), format!("{:?}", cfg.pipeline.flip_prob));
    meta.insert("batch".into(), cfg.training.batch_size.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta
}

fn meta_value<T>(meta: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::Format(format!("model header lacks {key}")))?;
    raw.parse()
        .map_err(|e| Error::Format(format!("model header {key}={raw:?}: {e}")).into())
}

fn synth_from_meta(meta: &BTreeMap<String, String>) -> Result<SynthSpec> {
    Ok(SynthSpec {
        classes: meta_value(meta, "synth.classes")?,
        train_per_class: meta_value(meta, "synth.train_per_class")?,
        test_per_class: meta_value(meta, "synth.test_per_class")?,
        size: meta_value(meta, "synth.size")?,
        seed: meta_value(meta, "synth.seed")?,
        jitter: meta_value(meta, "synth.jitter")?,
        noise: meta_value(meta, "synth.noise")?,
    })
}

fn pipeline_from_meta(meta: &BTreeMap<String, String>) -> Result<Pipeline> {
    Ok(Pipeline {
        resize: meta_value(meta, "pipeline.resize")?,
        crop: meta_value(meta, "pipeline.crop")?,
        flip_prob: meta_value(meta, "pipeline.flip_prob")?,
    })
}

fn fit(
    model_cfg: &MulterConfig,
    training: &TrainingConfig,
    pipeline: &Pipeline,
    data: &Dataset,
) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut cfg = model_cfg.clone();
    cfg.classes = data.classes();
    let mut model = Model::new(MulterParams::init(&cfg, training.seed)?, data.class_names.clone())?;
    let log = train_model(&mut model, data, training, pipeline)?;
    Ok((model, log))
}

fn final_accuracy(
    model: &Model,
    log: &[EpochMetrics],
    data: &Dataset,
    pipeline: &Pipeline,
    batch: usize,
) -> Result<f64> {
    match log.last() {
        Some(m) => Ok(m.eval_acc),
        None => Ok(evaluate(model, &data.test, pipeline, batch)?),
    }
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn train(args: &RunArgs) -> Result<ExitCode> {
    let cfg = args.resolve()?;
    let data = load_data(&cfg.data)?;
    create_out_dir(&cfg.out)?;
    let (mut model, log) = fit(&cfg.model, &cfg.training, &cfg.pipeline, &data)?;
    let accuracy = final_accuracy(&model, &log, &data, &cfg.pipeline, cfg.training.batch_size)?;
    model.meta = recipe_meta(&cfg);

    save_model(&model, &cfg.out.join(MODEL_FILE))?;
    let mut csv = Vec::new();
    write_metrics_csv(&log, &mut csv)?;
    let metrics_path = cfg.out.join(METRICS_FILE);
    fs::write(&metrics_path, csv).with_context(|| format!("cannot write {}", metrics_path.display()))?;
    let summary = summary_text(&cfg, &model, log.len(), accuracy);
    let summary_path = cfg.out.join(SUMMARY_FILE);
    fs::write(&summary_path, &summary).with_context(|| format!("cannot write {}", summary_path.display()))?;

    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn summary_text(cfg: &RunConfig, model: &Model, epochs: usize, accuracy: f64) -> String {
    let m = model.config();
    let data = match &cfg.data {
        DataSource::Synth(s) => format!(
            "synth ({} classes, {}+{} per class, {}px)",
            s.classes, s.train_per_class, s.test_per_class, s.size
        ),
        DataSource::Dir(root) => root.display().to_string(),
    };
    let mut s = String::new();
    s += &format!("data: {data}\n");
    s += &format!("classes: {}\n", model.class_names.join(", "));
    s += &format!(
        "model: levels {} K={} C={} branch={} widths {:?}\n",
        m.levels, m.codewords, m.out_dim, m.branch_dim, m.backbone.widths
    );
    s += &format!(
        "training: {} epochs, batch {}, lr {} (x{} every {}), momentum {}, seed {}\n",
        epochs,
        cfg.training.batch_size,
        cfg.training.base_lr,
        cfg.training.decay_factor,
        cfg.training.decay_every,
        cfg.training.momentum,
        cfg.seed
    );
    s += &format!("final eval accuracy: {accuracy:.4}\n");
    s
}

pub fn eval(args: &EvalArgs) -> Result<ExitCode> {
    let model = load_model(&args.model)?;
    let trained_on = model.meta.get("data").cloned();
    let data_arg = args.data.clone().or(trained_on).ok_or_else(|| {
        anyhow!(
            "model {} does not record its data source; pass --data",
            args.model.display()
        )
    })?;
    let (data, pipeline) = if data_arg == "synth" {
        let spec = if model.meta.get("data").map(String::as_str) == Some("synth") {
            synth_from_meta(&model.meta)?
        } else {
            SynthSpec::default()
        };
        let pipeline = pipeline_from_meta(&model.meta).unwrap_or_else(|_| desk_pipeline(spec.size));
        (synth_textures(&spec)?, pipeline)
    } else {
        let pipeline = pipeline_from_meta(&model.meta).unwrap_or_else(|_| Pipeline::standard());
        (load_image_dir(Path::new(&data_arg))?.load_images()?, pipeline)
    };
    if data.classes() != model.config().classes {
        return Err(Error::Data(format!(
            "model has {} classes but the data has {}",
            model.config().classes,
            data.classes()
        ))
        .into());
    }
    if data.class_names != model.class_names {
        return Err(Error::Data(format!(
            "class names differ: model {:?}, data {:?}",
            model.class_names, data.class_names
        ))
        .into());
    }
    let batch = match args.batch {
        Some(b) => b,
        None => meta_value(&model.meta, "batch").unwrap_or(16),
    };
    if batch == 0 {
        bail!(Error::Config("batch size must be positive".into()));
    }
    let accuracy = evaluate(&model, &data.test, &pipeline, batch)?;
    println!("accuracy={accuracy:.4}");
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(args: &AblateArgs) -> Result<ExitCode> {
    if args.seeds == 0 {
        bail!(Error::Usage("--seeds must be at least 1".into()));
    }
    let base = args.run.resolve()?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| base.seed + i).collect();
    let schemes = ablation_schemes();
    let mut acc = vec![Vec::with_capacity(seeds.len()); schemes.len()];
    for &seed in &seeds {
        let run = RunArgs {
            seed: Some(seed),
            ..args.run.clone()
        }
        .resolve()?;
        let data = load_data(&run.data)?;
        for (i, levels) in schemes.iter().enumerate() {
            let model_cfg = MulterConfig {
                levels: *levels,
                ..run.model.clone()
            };
            let (model, log) = fit(&model_cfg, &run.training, &run.pipeline, &data)?;
            let a = final_accuracy(&model, &log, &data, &run.pipeline, run.training.batch_size)?;
            eprintln!("seed {seed} {levels}: {a:.4}");
            acc[i].push(a);
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["scheme".to_string(), "accuracy".to_string()];
    if seeds.len() > 1 {
        header.extend(seeds.iter().map(|s| format!("seed_{s}")));
    }
    w.write_record(&header)?;
    for (levels, a) in schemes.iter().zip(&acc) {
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let mut row = vec![levels.to_string(), format!("{mean:.4}")];
        if seeds.len() > 1 {
            row.extend(a.iter().map(|v| format!("{v:.4}")));
        }
        w.write_record(&row)?;
    }
    let report = w.into_inner().map_err(|e| anyhow!("writing ablation report: {e}"))?;

    create_out_dir(&base.out)?;
    let path = base.out.join(ABLATION_FILE);
    fs::write(&path, &report).with_context(|| format!("cannot write {}", path.display()))?;
    std::io::stdout().write_all(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn print_suite(r: &SuiteReport) {
    let worst = r
        .worst()
        .map_or("-".to_string(), |c| format!("{} {}", c.name, c.outcome.worst));
    let coords: usize = r.cases.iter().map(|c| c.outcome.coords).sum();
    let skipped: usize = r.cases.iter().map(|c| c.outcome.skipped).sum();
    println!(
        "{:<10} {:>5} {:>8} {:>7} {:>12.3e}  {:<4}  {}",
        r.suite,
        r.cases.len(),
        coords,
        skipped,
        r.max_rel_err(),
        if r.passed() { "pass" } else { "FAIL" },
        worst
    );
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let opts = CheckOptions::default();
    println!("tolerance {TOLERANCE:e}, eps {:e}, {} seeds", opts.eps, args.seeds);
    println!(
        "{:<10} {:>5} {:>8} {:>7} {:>12}  {:<4}  worst",
        "suite", "cases", "coords", "skipped", "max_rel_err", ""
    );
    let suites: Vec<&str> = match &args.suite {
        Some(s) => vec![s.as_str()],
        None => gradcheck::SUITES.to_vec(),
    };
    let mut all_passed = true;
    for suite in suites {
        let report = gradcheck::run_suite(suite, args.seeds, &opts)?;
        print_suite(&report);
        all_passed &= report.passed();
    }
    if args.corrupt {
        let report = gradcheck::run_cases("corrupted", &gradcheck::corrupted_cases(), args.seeds, &opts)?;
        print_suite(&report);
        all_passed &= report.passed();
    }
    if all_passed {
        println!("all gradient checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradient check FAILED");
        Ok(ExitCode::from(VERIFICATION_FAILURE))
    }
}
