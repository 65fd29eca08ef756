//! `scout` — config-driven pipeline harness.
//!
//! Subcommands cover the whole pipeline: `gen` (corpus + teacher + split
//! to dataset files), `train` (surrogate or a named variant), `eval`
//! (metrics tables for a model file against a dataset), `ablate` (the
//! variant/seed grid), `bench` (inference latency) and `verify` (the fast
//! property suite). Configuration precedence is built-in defaults < TOML
//! config file < command-line flags; every resolved value is echoed into
//! the run manifest. Logs go to standard error; tables and files carry
//! the data. Exit codes: 0 ok, 1 verification failure, 2 configuration
//! error, 3 I/O or file-format error, 4 training divergence.

mod manifest;
mod verify;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use scout_core::ablation::{bench_inference, run_ablation, AblationContext, VariantSpec};
use scout_core::data::{
    read_dataset, write_dataset, DatasetHeader, FloatEncoding, SceneRecord,
    DATASET_FORMAT_VERSION,
};
use scout_core::error::Error;
use scout_core::experiment::{prepare_corpus, ExperimentConfig, ResolvedExperiment};
use scout_core::model::{load_checkpoint, save_checkpoint, SceneView, SurrogateModel};
use scout_core::train::{
    evaluate, train_logreg, train_surrogate, Classifier, LabelSource, LogRegModel,
    LOGREG_DEFAULT_L2,
};
use scout_core::Result;

use manifest::Manifest;

#[derive(Parser)]
#[command(
    name = "scout",
    version,
    about = "Distillation pipeline for scenario-coverage labelling"
)]
struct Cli {
    /// Experiment config file (TOML). Omitted: built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LabelsArg {
    Truth,
    Teacher,
}

impl From<LabelsArg> for LabelSource {
    fn from(v: LabelsArg) -> LabelSource {
        match v {
            LabelsArg::Truth => LabelSource::Truth,
            LabelsArg::Teacher => LabelSource::Teacher,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus, apply the teacher, split, and write datasets.
    Gen {
        /// Override the number of scenes.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train the surrogate (or a named ablation variant) on written datasets.
    Train {
        /// Label source override (default from config: teacher).
        #[arg(long, value_enum)]
        labels: Option<LabelsArg>,
        /// Ablation variant whose overrides to apply.
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Evaluate a model file against a dataset file.
    Eval {
        /// Surrogate checkpoint (default: checkpoint-full.ckpt in the
        /// output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Logistic-regression model file instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        logreg: Option<PathBuf>,
        /// Dataset file to evaluate on.
        #[arg(long)]
        dataset: PathBuf,
        /// Reference labels to score against.
        #[arg(long, value_enum, default_value = "truth")]
        against: LabelsArg,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Run the ablation grid over seeds and emit the comparison table.
    Ablate {
        /// Comma-separated sweep seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// Measure eval-mode inference latency for the surrogate and baseline.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        logreg: Option<PathBuf>,
        /// Scenes to time on (generated from the config).
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        /// Timing repetitions (after one warm-up pass).
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Run the fast property suite and print a pass/fail table.
    Verify {
        #[arg(long, hide = true)]
        sabotage_grad: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Gen { scenes } => cmd_gen(cli, *scenes),
        Command::Train { labels, variant } => cmd_train(cli, *labels, variant),
        Command::Eval {
            checkpoint,
            logreg,
            dataset,
            against,
            threshold,
        } => cmd_eval(
            cli,
            checkpoint.as_deref(),
            logreg.as_deref(),
            dataset,
            *against,
            *threshold,
        ),
        Command::Ablate { seeds } => cmd_ablate(cli, seeds),
        Command::Bench {
            checkpoint,
            logreg,
            scenes,
            reps,
        } => cmd_bench(cli, checkpoint.as_deref(), logreg.as_deref(), *scenes, *reps),
        Command::Verify { sabotage_grad } => cmd_verify(cli, *sabotage_grad),
    }
}

/// defaults < config file < command-line flags.
fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.display().to_string();
    }
    Ok(cfg)
}

fn dataset_dir(res: &ResolvedExperiment) -> PathBuf {
    res.output_dir.join("dataset")
}

fn cmd_gen(cli: &Cli, scenes: Option<usize>) -> Result<i32> {
    let mut cfg = load_config(cli)?;
    if let Some(n) = scenes {
        cfg.generator.n_scenes = Some(n);
    }
    let res = cfg.resolve()?;
    let corpus = prepare_corpus(&res)?;

    let dir = dataset_dir(&res);
    std::fs::create_dir_all(&dir)?;
    let mut man = Manifest::new("gen", cfg.digest_hex(), res.manifest_value());
    let mut n_files = 0;
    for (name, part) in corpus.partitions() {
        let header = DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            embed_dim: res.generator.embed_dim,
            n_labels: res.taxonomy.n_labels(),
            n_scenes: part.len(),
            taxonomy_digest: res.taxonomy.digest_hex(),
            generator_digest: res.generator.digest_hex(),
            teacher_digest: Some(res.teacher.digest_hex()),
            float_encoding: FloatEncoding::Decimal,
        };
        let path = dir.join(format!("{name}.jsonl"));
        write_dataset(&path, &header, part)?;
        log::info!("wrote {} scenes to {}", part.len(), path.display());
        man.record_output(&path)?;
        n_files += 1;
    }
    let man_path = man.write(&res.output_dir)?;
    println!(
        "{n_files} dataset files under {} (manifest {})",
        dir.display(),
        man_path.display()
    );
    Ok(0)
}

/// Header consistency against the resolved config; any mismatch is a
/// configuration error so pipelines fail before training on wrong data.
fn check_header(path: &Path, header: &DatasetHeader, res: &ResolvedExperiment) -> Result<()> {
    let mismatch = |what: &str, got: &str, want: &str| {
        Err(Error::Config(format!(
            "{}: {what} {got} does not match the resolved config ({want})",
            path.display()
        )))
    };
    if header.taxonomy_digest != res.taxonomy.digest_hex() {
        return mismatch(
            "taxonomy digest",
            &header.taxonomy_digest,
            &res.taxonomy.digest_hex(),
        );
    }
    if header.generator_digest != res.generator.digest_hex() {
        return mismatch(
            "generator digest",
            &header.generator_digest,
            &res.generator.digest_hex(),
        );
    }
    if header.teacher_digest.as_deref() != Some(res.teacher.digest_hex()).as_deref() {
        return mismatch(
            "teacher digest",
            header.teacher_digest.as_deref().unwrap_or("absent"),
            &res.teacher.digest_hex(),
        );
    }
    Ok(())
}

fn find_variant<'a>(res: &'a ResolvedExperiment, name: &str) -> Result<&'a VariantSpec> {
    res.ablation
        .variants
        .iter()
        .find(|v| v.name == name)
        .ok_or_else(|| Error::Lookup(format!("no ablation variant named {name:?}")))
}

fn cmd_train(cli: &Cli, labels: Option<LabelsArg>, variant_name: &str) -> Result<i32> {
    let cfg = load_config(cli)?;
    let mut res = cfg.resolve()?;
    if let Some(l) = labels {
        res.train.label_source = l.into();
    }
    let variant = find_variant(&res, variant_name)?.clone();
    if let Some(a) = variant.use_attention {
        res.model.use_attention = a;
    }
    if let Some(p) = variant.dropout_p {
        res.model.dropout_p = p;
    }
    if let Some(n) = variant.n_residual_blocks {
        res.model.n_residual_blocks = n;
    }
    res.model.validate()?;

    let dir = dataset_dir(&res);
    let train_path = dir.join("surrogate_train.jsonl");
    let val_path = dir.join("surrogate_val.jsonl");
    let (train_header, train_scenes) = read_dataset(&train_path)?;
    check_header(&train_path, &train_header, &res)?;
    let (val_header, val_scenes) = read_dataset(&val_path)?;
    check_header(&val_path, &val_header, &res)?;

    let n_used = ((train_scenes.len() as f64 * variant.train_fraction).round() as usize)
        .clamp(1, train_scenes.len());
    let train_used = &train_scenes[..n_used];
    log::info!(
        "training variant {variant_name:?} on {n_used}/{} scenes ({} labels)",
        train_scenes.len(),
        match res.train.label_source {
            LabelSource::Truth => "truth",
            LabelSource::Teacher => "teacher",
        }
    );

    let mut man = Manifest::new("train", cfg.digest_hex(), res.manifest_value());
    man.record_input(&train_path)?;
    man.record_input(&val_path)?;

    if variant.logreg {
        let model = train_logreg(train_used, &res.train)?;
        let path = res.output_dir.join("model-logreg.json");
        model.save(&path)?;
        man.record_output(&path)?;
        let man_path = man.write(&res.output_dir)?;
        println!(
            "logreg model ({} parameters) written to {} (manifest {})",
            model.n_parameters(),
            path.display(),
            man_path.display()
        );
        return Ok(0);
    }

    let (model, report) = train_surrogate(train_used, &val_scenes, &res.model, &res.train)?;
    let ckpt_path = res.output_dir.join(format!("checkpoint-{variant_name}.ckpt"));
    save_checkpoint(&model, &ckpt_path)?;
    let report_path = res.output_dir.join(format!("report-{variant_name}.json"));
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serialises"),
    )?;
    man.record_output(&ckpt_path)?;
    man.record_output(&report_path)?;
    let man_path = man.write(&res.output_dir)?;

    match report.best_epoch {
        Some(best) => println!(
            "best epoch {best} (val macro-F1 {:.4}); checkpoint {} (manifest {})",
            report.epochs[best].val_macro_f1,
            ckpt_path.display(),
            man_path.display()
        ),
        None => println!(
            "no epochs ran; initialized checkpoint {} (manifest {})",
            ckpt_path.display(),
            man_path.display()
        ),
    }
    Ok(0)
}

fn cmd_eval(
    cli: &Cli,
    checkpoint: Option<&Path>,
    logreg: Option<&Path>,
    dataset: &Path,
    against: LabelsArg,
    threshold: f64,
) -> Result<i32> {
    let cfg = load_config(cli)?;
    let res = cfg.resolve()?;
    let (header, scenes) = read_dataset(dataset)?;
    if header.taxonomy_digest != res.taxonomy.digest_hex() {
        return Err(Error::Config(format!(
            "{}: taxonomy digest {} does not match the configured taxonomy ({}); \
             refusing to evaluate against mismatched label spaces",
            dataset.display(),
            header.taxonomy_digest,
            res.taxonomy.digest_hex()
        )));
    }

    let mut man = Manifest::new("eval", cfg.digest_hex(), res.manifest_value());
    man.record_input(dataset)?;
    let default_ckpt = res.output_dir.join("checkpoint-full.ckpt");
    let (model, model_path): (Box<dyn Classifier>, &Path) = match (checkpoint, logreg) {
        (_, Some(p)) => (Box::new(LogRegModel::load(p)?), p),
        (Some(p), None) => (Box::new(load_checkpoint(p)?), p),
        (None, None) => (Box::new(load_checkpoint(&default_ckpt)?), &default_ckpt),
    };
    man.record_input(model_path)?;

    let report = evaluate(&*model, &scenes, &res.taxonomy, against.into(), threshold)?;
    let text = report.render_text();
    print!("{text}");

    let stem = dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let suffix = match against {
        LabelsArg::Truth => "truth",
        LabelsArg::Teacher => "teacher",
    };
    std::fs::create_dir_all(&res.output_dir)?;
    let txt_path = res.output_dir.join(format!("eval-{stem}-{suffix}.txt"));
    std::fs::write(&txt_path, &text)?;
    let json_path = res.output_dir.join(format!("eval-{stem}-{suffix}.json"));
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&report).expect("report serialises"),
    )?;
    man.record_output(&txt_path)?;
    man.record_output(&json_path)?;
    man.write(&res.output_dir)?;
    Ok(0)
}

fn cmd_ablate(cli: &Cli, seeds: &[u64]) -> Result<i32> {
    let cfg = load_config(cli)?;
    let res = cfg.resolve()?;
    let corpus = prepare_corpus(&res)?;
    let ctx = AblationContext {
        taxonomy: &res.taxonomy,
        model_cfg: &res.model,
        train_cfg: &res.train,
    };
    let table = run_ablation(&res.ablation, &corpus, seeds, &ctx)?;
    let text = table.render_text()?;
    print!("{text}");

    std::fs::create_dir_all(&res.output_dir)?;
    let txt_path = res.output_dir.join("ablation.txt");
    std::fs::write(&txt_path, &text)?;
    let jsonl_path = res.output_dir.join("ablation.jsonl");
    std::fs::write(&jsonl_path, table.render_structured()?)?;

    let mut man = Manifest::new("ablate", cfg.digest_hex(), res.manifest_value());
    man.record_output(&txt_path)?;
    man.record_output(&jsonl_path)?;
    man.write(&res.output_dir)?;
    Ok(0)
}

fn cmd_bench(
    cli: &Cli,
    checkpoint: Option<&Path>,
    logreg: Option<&Path>,
    n_scenes: usize,
    reps: usize,
) -> Result<i32> {
    let cfg = load_config(cli)?;
    let res = cfg.resolve()?;
    let mut gen = res.generator.clone();
    gen.n_scenes = n_scenes;
    let scenes: Vec<SceneRecord> = scout_core::data::generate(&gen, &res.taxonomy)?;
    let views: Vec<SceneView> = scenes
        .iter()
        .map(|r| SceneView {
            embeddings: &r.embeddings,
            mask: &r.mask,
        })
        .collect();

    let surrogate = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => SurrogateModel::init(res.model.clone())?,
    };
    let baseline = match logreg {
        Some(p) => LogRegModel::load(p)?,
        // Weight content does not affect latency; a zero model benches the
        // same arithmetic as a trained one.
        None => LogRegModel {
            weight: scout_core::tensor::Matrix::zeros(
                res.taxonomy.n_labels(),
                res.generator.embed_dim,
            ),
            bias: vec![0.0; res.taxonomy.n_labels()],
            l2_strength: LOGREG_DEFAULT_L2,
        },
    };
    let models: Vec<(&str, &dyn Classifier)> =
        vec![("surrogate", &surrogate), ("logreg", &baseline)];
    let report = bench_inference(&models, &views, reps)?;
    let text = report.render_text()?;
    print!("{text}");

    std::fs::create_dir_all(&res.output_dir)?;
    let txt_path = res.output_dir.join("bench.txt");
    std::fs::write(&txt_path, &text)?;
    let jsonl_path = res.output_dir.join("bench.jsonl");
    std::fs::write(&jsonl_path, report.render_structured()?)?;

    let mut man = Manifest::new("bench", cfg.digest_hex(), res.manifest_value());
    man.record_output(&txt_path)?;
    man.record_output(&jsonl_path)?;
    man.write(&res.output_dir)?;
    Ok(0)
}

fn cmd_verify(cli: &Cli, sabotage_grad: bool) -> Result<i32> {
    let cfg = load_config(cli)?;
    let res = cfg.resolve()?;
    let results = verify::run_all(sabotage_grad);
    let mut text = String::new();
    let mut n_pass = 0;
    for r in &results {
        if r.passed {
            n_pass += 1;
        }
        text.push_str(&format!(
            "[{}] {} — {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        ));
    }
    text.push_str(&format!("{n_pass}/{} checks passed\n", results.len()));
    print!("{text}");

    std::fs::create_dir_all(&res.output_dir)?;
    let path = res.output_dir.join("verify.txt");
    std::fs::write(&path, &text)?;
    let mut man = Manifest::new("verify", cfg.digest_hex(), res.manifest_value());
    man.record_output(&path)?;
    man.write(&res.output_dir)?;
    Ok(if n_pass == results.len() { 0 } else { 1 })
}
