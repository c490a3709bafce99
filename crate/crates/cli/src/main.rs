use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use emostress::config::{load_split, RunConfig};
use emostress::corpus::{corpus_stats, load_corpus, write_split, Partition, Source};
use emostress::emotaxonomy::{validate_taxonomy, REFERENCE_COUNTS};
use emostress::encoder::EncoderName;
use emostress::error::Error;
use emostress::experiments::{
    self, data_reduction_study, describe, emotion_distribution_study, manifest_header, primary_matrix,
    rerender, tune_cell, write_json, CellData, Corpora, DevChoice, Labeler, Study, StudyContext,
};
use emostress::models::{AssembledModel, Architecture, ModelConfig, Task};
use emostress::safetensors::write_atomic;
use emostress::trainer::{evaluate_emotion, evaluate_stress};
use emostress::tuner::Strategy;

#[derive(Parser, Debug)]
#[command(name = "emostress", version, about = "Emotion-infused stress detection experiments")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "EMOSTRESS_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the workspace root named in the config.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// Validate the config and print the plan; write nothing.
    #[arg(long, global = true)]
    dry_run: bool,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, validate and split the configured corpora.
    Corpus {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coarse emotion label counts of the emotion corpus.
    Taxonomy {
        /// Fail when counts differ from the reference table.
        #[arg(long)]
        strict: bool,
    },
    /// Train one run.
    Train(TrainArgs),
    /// Tune one architecture/encoder cell on a dev set.
    Tune {
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpora to score on.
        #[arg(long, value_delimiter = ',', default_value = "minority,stress")]
        on: Vec<Source>,
        #[arg(long, default_value = "test")]
        partition: PartitionArg,
        /// Also write the reports as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a whole study.
    Experiment {
        study: Study,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render the grids of a finished study.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct CellArgs {
    #[arg(long)]
    arch: Architecture,
    #[arg(long)]
    encoder: EncoderName,
    /// Dev set for tuning and early stopping.
    #[arg(long, default_value = "mstress")]
    dev: DevChoice,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cell: CellArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum PartitionArg {
    Dev,
    Test,
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(
                Error::Config(_)
                | Error::MissingFile(_)
                | Error::MissingColumn(_)
                | Error::Validation { .. }
                | Error::Empty(_)
                | Error::Split(_)
                | Error::Taxonomy(_),
            ) => 3,
            _ => 1,
        };
        Self { code, err }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => "config",
        Some(Error::MissingFile(_)) => "missing_file",
        Some(Error::MissingColumn(_)) => "missing_column",
        Some(Error::Validation { .. }) => "validation",
        Some(Error::Empty(_)) => "empty_input",
        Some(Error::Split(_)) => "split",
        Some(Error::Taxonomy(_)) => "taxonomy",
        Some(Error::Encoder(_)) => "encoder",
        Some(Error::Checkpoint(_)) => "checkpoint",
        Some(Error::Divergence { .. }) => "divergence",
        Some(Error::Experiment(_)) => "experiment",
        Some(Error::Tuning(_)) => "tuning",
        Some(_) => "runtime",
        None => "runtime",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let record = serde_json::json!({
                "error": {
                    "kind": error_kind(&f.err),
                    "message": format!("{:#}", f.err),
                }
            });
            eprintln!("{record}");
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(w) = &cli.workspace {
        cfg.workspace = w.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    if let Command::Report { out } = &cli.command {
        return report(out);
    }
    let cfg = load_config(&cli)?;
    let root = cfg.output_root();
    match &cli.command {
        Command::Corpus { out } => corpus(&cfg, &out.clone().unwrap_or(root.join("corpus")), cli.dry_run),
        Command::Taxonomy { strict } => taxonomy(&cfg, *strict, cli.dry_run),
        Command::Train(a) => train(&cfg, a, &root, cli.dry_run),
        Command::Tune {
            cell,
            budget,
            strategy,
            out,
        } => {
            let mut cfg = cfg.clone();
            if let Some(b) = budget {
                cfg.budget = *b;
            }
            if let Some(s) = strategy {
                cfg.strategy = *s;
            }
            cfg.validate()?;
            let dir = out.clone().unwrap_or_else(|| {
                root.join("tune")
                    .join(format!("{}-{}-{}", cell.arch.key(), cell.encoder.key(), cell.dev))
            });
            tune(&cfg, cell, &dir, cli.dry_run)
        }
        Command::Evaluate {
            checkpoint,
            on,
            partition,
            out,
        } => evaluate(&cfg, checkpoint, on, *partition, out.as_deref(), cli.dry_run),
        Command::Experiment { study, out } => {
            let dir = out.clone().unwrap_or(root.join(study.key()));
            experiment(&cfg, *study, &dir, cli.dry_run)
        }
        Command::Report { .. } => unreachable!(),
    }
}

fn corpus(cfg: &RunConfig, out: &Path, dry_run: bool) -> Result<u8, Failure> {
    let tax = cfg.taxonomy()?;
    let mut bad = 0usize;
    for source in [Source::Stress, Source::Minority, Source::Emotion] {
        let c = cfg.corpus_config(source);
        let files: Vec<&PathBuf> = [&c.path, &c.train, &c.dev, &c.test].into_iter().flatten().collect();
        let mut all = Vec::new();
        for f in files {
            let path = cfg.resolve(f);
            let r = load_corpus(&path, source, &c.schema, &tax)?;
            for e in r.rejected.iter().take(10) {
                println!("{}: row {}: {}", path.display(), e.row, e.message);
            }
            if r.rejected.len() > 10 {
                println!("{}: {} more rejected rows", path.display(), r.rejected.len() - 10);
            }
            bad += r.rejected.len();
            all.extend(r.examples);
        }
        let s = corpus_stats(&all);
        println!(
            "{source}: {} examples, {} stressed ({:.1}%), {} not stressed, {} unlabelled",
            s.n, s.positives, s.positive_pct, s.negatives, s.unlabeled
        );
    }
    if bad > 0 {
        return Err(anyhow::anyhow!(Error::Config(format!("{bad} rejected row(s); nothing written"))).into());
    }
    for source in [Source::Stress, Source::Minority, Source::Emotion] {
        let split = load_split(cfg, source, &tax)?;
        let c = split.counts();
        let dir = out.join(source.name());
        if dry_run {
            println!("would write {} ({}/{}/{})", dir.display(), c.train, c.dev, c.test);
            continue;
        }
        let m = write_split(&dir, &split)?;
        println!("wrote {} ({}/{}/{})", dir.display(), c.train, c.dev, c.test);
        log::debug!("{m:?}");
    }
    Ok(0)
}

fn taxonomy(cfg: &RunConfig, strict: bool, dry_run: bool) -> Result<u8, Failure> {
    let tax = cfg.taxonomy()?;
    let split = load_split(cfg, Source::Emotion, &tax)?;
    let vectors: Vec<_> = Partition::ALL
        .iter()
        .flat_map(|p| split.partition(*p))
        .filter_map(|e| e.emotion_vector)
        .collect();
    let report = validate_taxonomy(&vectors);
    print!("{}", report.render());
    let mism = report.mismatches();
    for (l, got, want) in &mism {
        println!("{}: {got} (reference {want})", l.name());
    }
    if mism.is_empty() {
        println!("all {} coarse counts match the reference table", REFERENCE_COUNTS.len());
    }
    if dry_run {
        return Ok(0);
    }
    if strict && !mism.is_empty() {
        return Err(anyhow::anyhow!(Error::Taxonomy(format!("{} label count(s) differ", mism.len()))).into());
    }
    Ok(0)
}

fn train(cfg: &RunConfig, a: &TrainArgs, root: &Path, dry_run: bool) -> Result<u8, Failure> {
    let enc = cfg.encoder(a.cell.encoder)?.clone();
    let mut config = ModelConfig::new(a.cell.arch, enc.clone());
    if let Some(v) = a.lr {
        config.learning_rate = v;
    }
    if let Some(v) = a.dropout {
        config.dropout = v;
    }
    if a.lambda.is_some() {
        config.lambda = a.lambda;
    }
    config.validate()?;
    let dir = a.out.clone().unwrap_or_else(|| {
        root.join("train")
            .join(format!("{}-{}-seed{}", a.cell.arch.key(), a.cell.encoder.key(), a.seed))
    });
    if dry_run {
        println!("train {} / {} seed {} tuned on {} dev", a.cell.arch, a.cell.encoder, a.seed, a.cell.dev);
        println!("model config: {}", serde_json::to_string(&config).map_err(Error::from)?);
        if a.cell.arch == Architecture::Multi {
            println!("emotion labeler: {}", serde_json::to_string(&Labeler::model_config(cfg, &enc)).map_err(Error::from)?);
        }
        println!("output: {}", dir.display());
        return Ok(0);
    }
    experiments::encoder_status(cfg, &enc).map_err(Error::Encoder)?;
    let corpora = Corpora::load(cfg)?;
    let ctx = StudyContext::new(cfg, &corpora);
    let started = Instant::now();
    let labeler = match a.cell.arch {
        Architecture::Multi => Some(Labeler::train(&ctx, &enc, a.seed)?),
        _ => None,
    };
    let data = CellData::new(&ctx, &corpora.stress, a.cell.dev, a.cell.arch, labeler.as_ref())?;
    let out = data.train(&config, &ctx.opts, a.seed)?;
    let mut reports = BTreeMap::new();
    for split in [&corpora.minority, &corpora.stress] {
        let name = format!("{}/test", split.name);
        let r = evaluate_stress(&out.model, &name, &split.test)?;
        println!("{name}: F1 {:.2}, accuracy {:.2}", r.f1, r.accuracy);
        reports.insert(name, r);
    }
    let mut manifest = manifest_header(&ctx, "train");
    let m = manifest.as_object_mut().expect("object");
    m.insert("seed".into(), a.seed.into());
    m.insert("tuning_dev".into(), a.cell.dev.key().into());
    m.insert("model_config".into(), serde_json::to_value(&config).map_err(Error::from)?);
    m.insert("labeler".into(), labeler.as_ref().map_or(serde_json::Value::Null, |l| {
        serde_json::json!({ "fingerprint": l.fingerprint(), "dev": l.dev, "training": l.outcome })
    }));
    m.insert("data_access".into(), serde_json::to_value(&out.data_access).map_err(Error::from)?);
    m.insert("training".into(), out.summary());
    m.insert("reports".into(), serde_json::to_value(&reports).map_err(Error::from)?);
    m.insert("wall_clock_secs".into(), started.elapsed().as_secs_f64().into());
    write_json(&dir.join("manifest.json"), &manifest)?;
    out.model.save(&dir.join("model.safetensors"), &manifest)?;
    println!("wrote {}", dir.display());
    Ok(0)
}

fn tune(cfg: &RunConfig, cell: &CellArgs, dir: &Path, dry_run: bool) -> Result<u8, Failure> {
    let enc = cfg.encoder(cell.encoder)?.clone();
    if dry_run {
        println!(
            "tune {} / {} on {} dev: {} {} trials, seed {}",
            cell.arch, cell.encoder, cell.dev, cfg.budget, cfg.strategy, cfg.tuning_seed
        );
        println!("output: {}", dir.display());
        return Ok(0);
    }
    experiments::encoder_status(cfg, &enc).map_err(Error::Encoder)?;
    let corpora = Corpora::load(cfg)?;
    let ctx = StudyContext::new(cfg, &corpora);
    let labeler = match cell.arch {
        Architecture::Multi => Some(Labeler::train(&ctx, &enc, cfg.seed_set().seeds()[0])?),
        _ => None,
    };
    let data = CellData::new(&ctx, &corpora.stress, cell.dev, cell.arch, labeler.as_ref())?;
    let base = ModelConfig::new(cell.arch, enc);
    let result = tune_cell(&ctx, &data, &base)?;
    write_atomic(&dir.join("trials.jsonl"), result.trial_log().as_bytes())?;
    let best = result.best.apply(&base);
    let mut manifest = manifest_header(&ctx, "tune");
    let m = manifest.as_object_mut().expect("object");
    m.insert("tuning_dev".into(), cell.dev.key().into());
    m.insert("best_config".into(), serde_json::to_value(&best).map_err(Error::from)?);
    m.insert("best_criterion".into(), result.best_criterion.into());
    m.insert("strategy".into(), serde_json::to_value(result.strategy).map_err(Error::from)?);
    m.insert("budget".into(), result.budget.into());
    write_json(&dir.join("best.json"), &manifest)?;
    let failed = result.trials.iter().filter(|t| t.criterion.is_none()).count();
    println!(
        "best dev F1 {:.2} with lr {:.3e}, dropout {:.3}{} ({failed} failed trial(s))",
        result.best_criterion,
        result.best.learning_rate,
        result.best.dropout,
        result.best.lambda.map(|l| format!(", lambda {l:.3}")).unwrap_or_default(),
    );
    println!("wrote {}", dir.display());
    Ok(0)
}

fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    on: &[Source],
    partition: PartitionArg,
    out: Option<&Path>,
    dry_run: bool,
) -> Result<u8, Failure> {
    if !checkpoint.exists() {
        return Err(Error::MissingFile(checkpoint.to_path_buf()).into());
    }
    if dry_run {
        println!("evaluate {} on {on:?} ({partition:?})", checkpoint.display());
        return Ok(0);
    }
    let (model, _) = AssembledModel::load(checkpoint, &cfg.workspace)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let corpora = Corpora::load(cfg)?;
    let part = match partition {
        PartitionArg::Dev => Partition::Dev,
        PartitionArg::Test => Partition::Test,
    };
    let mut reports = BTreeMap::new();
    for source in on {
        let split = match source {
            Source::Stress => &corpora.stress,
            Source::Minority => &corpora.minority,
            Source::Emotion => &corpora.emotion,
        };
        let name = format!("{}/{}", split.name, part.name());
        let set = split.partition(part);
        let r = match source {
            Source::Emotion => {
                if !model.has(Task::Emotion) {
                    return Err(Error::Config(format!("{} has no emotion head", checkpoint.display())).into());
                }
                evaluate_emotion(&model, &name, set, cfg.emotion_threshold)?
            }
            _ => evaluate_stress(&model, &name, set)?,
        };
        println!("{name}: F1 {:.2}, accuracy {:.2}, n {}", r.f1, r.accuracy, r.n);
        reports.insert(name, r);
    }
    if let Some(p) = out {
        write_json(p, &serde_json::json!({
            "checkpoint": checkpoint,
            "model_fingerprint": model.fingerprint(),
            "data_fingerprints": corpora.fingerprints(),
            "reports": reports,
        }))?;
    }
    Ok(0)
}

fn experiment(cfg: &RunConfig, study: Study, out: &Path, dry_run: bool) -> Result<u8, Failure> {
    if dry_run {
        print!("{}", experiments::plan(cfg, study, out));
        return Ok(0);
    }
    let corpora = Corpora::load(cfg)?;
    let ctx = StudyContext::new(cfg, &corpora);
    let cells = match study {
        Study::Primary => {
            let r = primary_matrix(&ctx, out)?;
            for g in [&r.minority_test, &r.stress_test, &r.minority_dev] {
                println!("{}", g.render());
            }
            r.cells
        }
        Study::Reduction => data_reduction_study(&ctx, out)?.cells,
        Study::Emotions => {
            let name = cfg.distribution_encoder.unwrap_or(cfg.encoders[0].name);
            let r = emotion_distribution_study(&ctx, cfg.encoder(name)?, out)?;
            println!(
                "labeler macro F1 {:.2}; cross-corpus L1 {:.4}; ordering holds: {}",
                r.labeler_test.f1, r.cross_corpus_l1, r.ordering_holds
            );
            Vec::new()
        }
    };
    for c in &cells {
        println!("{}", describe(c));
    }
    println!("wrote {}", out.display());
    let failed = cells
        .iter()
        .filter(|c| matches!(c.status, experiments::CellStatus::Failed(_)))
        .count();
    Ok(if failed > 0 { 4 } else { 0 })
}

fn report(out: &Path) -> Result<u8, Failure> {
    if out.join("grids.json").exists() {
        for (name, text) in rerender(out)? {
            println!("== {name}\n{text}");
        }
        return Ok(0);
    }
    for f in ["reduction.txt", "distribution.txt"] {
        let p = out.join(f);
        if p.exists() {
            print!("{}", std::fs::read_to_string(&p).with_context(|| p.display().to_string())?);
            return Ok(0);
        }
    }
    Err(Error::MissingFile(out.join("grids.json")).into())
}
