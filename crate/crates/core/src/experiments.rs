//! Study drivers: the architecture x encoder matrix, the training-size
//! reduction study and the predicted-emotion distribution study.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{load_split, RunConfig};
use crate::corpus::{
    content_checksum, reduce_training_set, DatasetSplit, Source, StressLabel, TextExample, TrainDev,
};
use crate::emotaxonomy::{CoarseEmotion, EmotionVector, NUM_EMOTIONS};
use crate::encoder::{EncoderIdentity, EncoderName};
use crate::error::{Error, Result};
use crate::evalkit::{reference, round2, MetricReport, ResultsGrid};
use crate::models::{Architecture, AssembledModel, ModelConfig, Task};
use crate::safetensors::write_atomic;
use crate::trainer::{
    evaluate_emotion, evaluate_stress, pseudo_label_emotions, run_seeded, train_alternating,
    train_fine_tune, train_joint, train_single_task, RunResult, SeededResult, TrainOptions,
    TrainOutcome,
};
use crate::tuner::{tune, tune_random_parallel, Hyperparams, SearchSpace, Strategy, TuneResult};

/// The three ingested corpora, each already split.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub stress: DatasetSplit,
    pub minority: DatasetSplit,
    pub emotion: DatasetSplit,
}

impl Corpora {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let tax = cfg.taxonomy()?;
        Ok(Self {
            stress: load_split(cfg, Source::Stress, &tax)?,
            minority: load_split(cfg, Source::Minority, &tax)?,
            emotion: load_split(cfg, Source::Emotion, &tax)?,
        })
    }

    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        let mut m = self.stress.fingerprints();
        m.extend(self.minority.fingerprints());
        m.extend(self.emotion.fingerprints());
        m
    }
}

/// Dev set that drives tuning and early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DevChoice {
    Minority,
    Stress,
}

impl DevChoice {
    pub fn key(self) -> &'static str {
        match self {
            DevChoice::Minority => "mstress",
            DevChoice::Stress => "dreaddit",
        }
    }

    fn split(self, c: &Corpora) -> &DatasetSplit {
        match self {
            DevChoice::Minority => &c.minority,
            DevChoice::Stress => &c.stress,
        }
    }
}

impl FromStr for DevChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<Source>()? {
            Source::Minority => Ok(DevChoice::Minority),
            Source::Stress => Ok(DevChoice::Stress),
            Source::Emotion => Err(Error::Config("the emotion corpus cannot be the tuning dev set".into())),
        }
    }
}

impl fmt::Display for DevChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Primary,
    Reduction,
    Emotions,
}

impl Study {
    pub fn key(self) -> &'static str {
        match self {
            Study::Primary => "primary",
            Study::Reduction => "reduction",
            Study::Emotions => "emotions",
        }
    }
}

impl FromStr for Study {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primary" => Ok(Study::Primary),
            "reduction" => Ok(Study::Reduction),
            "emotions" | "distribution" => Ok(Study::Emotions),
            _ => Err(Error::Config(format!("unknown study `{s}`"))),
        }
    }
}

/// Shared read-only inputs of a study.
pub struct StudyContext<'a> {
    pub cfg: &'a RunConfig,
    pub corpora: &'a Corpora,
    pub opts: TrainOptions,
}

impl<'a> StudyContext<'a> {
    pub fn new(cfg: &'a RunConfig, corpora: &'a Corpora) -> Self {
        Self {
            cfg,
            corpora,
            opts: cfg.train_options(),
        }
    }

    fn emotion_data(&self) -> TrainDev<'a> {
        self.corpora.emotion.without_test()
    }
}

/// `Err` holds the reason the encoder cannot be used.
pub fn encoder_status(cfg: &RunConfig, enc: &EncoderIdentity) -> std::result::Result<(), String> {
    if !enc.name.needs_assets() {
        return Ok(());
    }
    match enc.asset_dir(&cfg.workspace) {
        Ok(_) if enc.is_available(&cfg.workspace) => Ok(()),
        Ok(d) => Err(format!("assets for `{}` not found at {}", enc.name, d.display())),
        Err(e) => Err(e.to_string()),
    }
}

/// Frozen single-task emotion model used to pseudo-label stress text.
pub struct Labeler {
    pub model: AssembledModel,
    pub dev: MetricReport,
    pub outcome: serde_json::Value,
}

impl Labeler {
    pub fn model_config(cfg: &RunConfig, encoder: &EncoderIdentity) -> ModelConfig {
        ModelConfig {
            dropout: cfg.labeler.dropout,
            learning_rate: cfg.labeler.learning_rate,
            ..ModelConfig::new(Architecture::SingleTask, encoder.clone())
        }
    }

    pub fn train(ctx: &StudyContext<'_>, encoder: &EncoderIdentity, seed: u64) -> Result<Self> {
        let config = Self::model_config(ctx.cfg, encoder);
        let data = ctx.emotion_data();
        let out = train_single_task(&config, Task::Emotion, &data, &ctx.opts, seed)?;
        let dev = evaluate_emotion(&out.model, &data.dev_name, data.dev, ctx.cfg.emotion_threshold)?;
        log::info!("labeler {}: dev macro F1 {:.2}", encoder.name, dev.f1);
        Ok(Self {
            outcome: out.summary(),
            model: out.model.freeze(),
            dev,
        })
    }

    pub fn from_model(model: AssembledModel, dev: MetricReport) -> Self {
        Self {
            model: model.freeze(),
            dev,
            outcome: serde_json::Value::Null,
        }
    }

    pub fn fingerprint(&self) -> String {
        self.model.fingerprint()
    }

    pub fn label(&self, examples: &[TextExample], threshold: f64) -> Result<Vec<TextExample>> {
        pseudo_label_emotions(&self.model, examples, threshold)
    }
}

/// Trains one run of any architecture. `pseudo_train` is the stress training
/// set carrying predicted emotion vectors and is required by Multi only.
pub fn train_architecture(
    config: &ModelConfig,
    stress: &TrainDev<'_>,
    emotion: &TrainDev<'_>,
    pseudo_train: Option<&[TextExample]>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    match config.architecture {
        Architecture::SingleTask => train_single_task(config, Task::Stress, stress, opts, seed),
        Architecture::FineTune => train_fine_tune(config, emotion, stress, opts, seed),
        Architecture::MultiAlt => train_alternating(config, emotion, stress, opts, seed),
        Architecture::Multi => {
            let train = pseudo_train
                .ok_or_else(|| Error::Training("multi needs a pseudo-labelled training set".into()))?;
            if train.len() != stress.train.len() {
                return Err(Error::Training("pseudo-labelled set does not match the stress training set".into()));
            }
            let data = TrainDev::new(
                format!("{}+pseudo", stress.train_name),
                train,
                stress.dev_name.clone(),
                stress.dev,
            );
            train_joint(config, &data, opts, seed)
        }
    }
}

/// Fails if any partition read during training is a test partition.
pub fn audit_access(access: &[(String, String)]) -> Result<()> {
    match access.iter().find(|(n, _)| n.split('+').next().is_some_and(|b| b.ends_with("/test"))) {
        Some((n, _)) => Err(Error::Experiment(format!("test partition `{n}` was read during training"))),
        None => Ok(()),
    }
}

/// Runs `f` over `jobs` on up to `workers` threads; results keep job order.
pub fn run_queue<T, R, F>(jobs: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "reason")]
pub enum CellStatus {
    Done,
    Skipped(String),
    Failed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellOutcome {
    pub id: String,
    pub architecture: Architecture,
    pub encoder: EncoderName,
    #[serde(default)]
    pub fraction: Option<f64>,
    pub train_size: usize,
    #[serde(flatten)]
    pub status: CellStatus,
    pub tuning: Option<TuneResult>,
    pub result: Option<SeededResult>,
}

impl CellOutcome {
    pub fn mean(&self, eval_set: &str) -> Option<&MetricReport> {
        self.result.as_ref().and_then(|r| r.mean.get(eval_set))
    }
}

struct CellJob<'a> {
    id: String,
    architecture: Architecture,
    encoder: EncoderIdentity,
    fraction: Option<f64>,
    split: &'a DatasetSplit,
    dev: DevChoice,
    evals: Vec<(String, &'a [TextExample])>,
}

/// Common manifest fields: resolved config and data fingerprints.
pub fn manifest_header(ctx: &StudyContext<'_>, kind: &str) -> serde_json::Value {
    serde_json::json!({
        "format": "emostress-run",
        "version": 1,
        "study": kind,
        "config": ctx.cfg,
        "data_fingerprints": ctx.corpora.fingerprints(),
    })
}

pub fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn run_cell(
    ctx: &StudyContext<'_>,
    study: Study,
    job: &CellJob<'_>,
    labeler: Option<&Labeler>,
    dir: &Path,
) -> CellOutcome {
    let mut outcome = CellOutcome {
        id: job.id.clone(),
        architecture: job.architecture,
        encoder: job.encoder.name,
        fraction: job.fraction,
        train_size: job.split.train.len(),
        status: CellStatus::Done,
        tuning: None,
        result: None,
    };
    if let Err(reason) = encoder_status(ctx.cfg, &job.encoder) {
        log::warn!("cell {} skipped: {reason}", job.id);
        outcome.status = CellStatus::Skipped(reason);
        return outcome;
    }
    match execute_cell(ctx, study, job, labeler, dir) {
        Ok((t, r)) => {
            outcome.tuning = Some(t);
            outcome.result = Some(r);
        }
        Err(e) => {
            log::error!("cell {} failed: {e}", job.id);
            outcome.status = CellStatus::Failed(e.to_string());
        }
    }
    outcome
}

/// Training inputs of one cell: stress train plus the tuning dev set, the
/// emotion corpus, and pseudo-labels when the architecture needs them.
pub struct CellData<'a> {
    pub stress: TrainDev<'a>,
    pub emotion: TrainDev<'a>,
    pub pseudo: Option<Vec<TextExample>>,
}

impl<'a> CellData<'a> {
    pub fn new(
        ctx: &StudyContext<'a>,
        split: &'a DatasetSplit,
        dev: DevChoice,
        architecture: Architecture,
        labeler: Option<&Labeler>,
    ) -> Result<Self> {
        let dev_split = dev.split(ctx.corpora);
        let stress = TrainDev::new(
            format!("{}/train", split.name),
            &split.train,
            format!("{}/dev", dev_split.name),
            &dev_split.dev,
        );
        let pseudo = match architecture {
            Architecture::Multi => {
                let l = labeler.ok_or_else(|| Error::Experiment("multi needs an emotion labeler".into()))?;
                Some(l.label(stress.train, ctx.cfg.emotion_threshold)?)
            }
            _ => None,
        };
        Ok(Self {
            stress,
            emotion: ctx.emotion_data(),
            pseudo,
        })
    }

    /// One audited training run.
    pub fn train(&self, config: &ModelConfig, opts: &TrainOptions, seed: u64) -> Result<TrainOutcome> {
        let out = train_architecture(config, &self.stress, &self.emotion, self.pseudo.as_deref(), opts, seed)?;
        audit_access(&out.data_access)?;
        Ok(out)
    }
}

/// Hyperparameter search for one cell; trials train with the first seed.
pub fn tune_cell(ctx: &StudyContext<'_>, data: &CellData<'_>, base: &ModelConfig) -> Result<TuneResult> {
    let cfg = ctx.cfg;
    let space = SearchSpace::for_architecture(base.architecture);
    let seed = cfg.seed_set().seeds()[0];
    let objective = |h: &Hyperparams| -> Result<f64> { Ok(data.train(&h.apply(base), &ctx.opts, seed)?.best_metric) };
    match cfg.strategy {
        Strategy::Random if cfg.workers > 1 => {
            tune_random_parallel(&space, cfg.budget, cfg.tuning_seed, cfg.workers, objective)
        }
        s => tune(&space, s, cfg.budget, cfg.tuning_seed, objective),
    }
}

fn execute_cell(
    ctx: &StudyContext<'_>,
    study: Study,
    job: &CellJob<'_>,
    labeler: Option<&Labeler>,
    dir: &Path,
) -> Result<(TuneResult, SeededResult)> {
    let cfg = ctx.cfg;
    let data = CellData::new(ctx, job.split, job.dev, job.architecture, labeler)?;
    let base = ModelConfig::new(job.architecture, job.encoder.clone());
    let tuned = tune_cell(ctx, &data, &base)?;
    write_atomic(&dir.join("trials.jsonl"), tuned.trial_log().as_bytes())?;
    let model_config = tuned.best.apply(&base);
    let header = manifest_header(ctx, study.key());
    let result = run_seeded(&cfg.seed_set(), |seed| {
        let started = Instant::now();
        let out = data.train(&model_config, &ctx.opts, seed)?;
        let mut reports = BTreeMap::new();
        let mut evaluated = Vec::new();
        for (name, set) in &job.evals {
            reports.insert(name.clone(), evaluate_stress(&out.model, name, set)?);
            evaluated.push((name.clone(), content_checksum(set)));
        }
        let mut manifest = header.clone();
        let m = manifest.as_object_mut().expect("object");
        m.insert("cell".into(), serde_json::json!({
            "id": job.id,
            "architecture": job.architecture,
            "encoder": job.encoder.name,
            "fraction": job.fraction,
            "tuning_dev": job.dev,
        }));
        m.insert("seed".into(), seed.into());
        m.insert("model_config".into(), serde_json::to_value(&model_config)?);
        m.insert("tuning".into(), serde_json::json!({
            "strategy": tuned.strategy,
            "budget": tuned.budget,
            "best_criterion": tuned.best_criterion,
            "best": tuned.best,
        }));
        m.insert("labeler".into(), match labeler {
            Some(l) if job.architecture == Architecture::Multi => serde_json::json!({
                "fingerprint": l.fingerprint(),
                "dev": l.dev,
                "training": l.outcome,
            }),
            _ => serde_json::Value::Null,
        });
        m.insert("data_access".into(), serde_json::to_value(&out.data_access)?);
        m.insert("evaluated_on".into(), serde_json::to_value(&evaluated)?);
        m.insert("training".into(), out.summary());
        m.insert("reports".into(), serde_json::to_value(&reports)?);
        m.insert("wall_clock_secs".into(), started.elapsed().as_secs_f64().into());
        let path = dir.join(format!("seed-{seed}.json"));
        write_json(&path, &manifest)?;
        if cfg.save_checkpoints {
            out.model.save(&dir.join(format!("seed-{seed}.safetensors")), &manifest)?;
        }
        Ok(RunResult {
            seed,
            reports,
            fingerprint: out.model.fingerprint(),
            manifest: serde_json::json!({ "path": path }),
        })
    })?;
    Ok((tuned, result))
}

/// Labelers for every usable encoder when `needed`; trained with the first seed.
fn train_labelers(
    ctx: &StudyContext<'_>,
    encoders: &[EncoderIdentity],
    out: &Path,
) -> BTreeMap<EncoderName, std::result::Result<Labeler, String>> {
    let usable: Vec<&EncoderIdentity> = encoders
        .iter()
        .filter(|e| encoder_status(ctx.cfg, e).is_ok())
        .collect();
    let seed = ctx.cfg.seed_set().seeds()[0];
    let trained = run_queue(&usable, ctx.cfg.workers, |e| {
        let l = Labeler::train(ctx, e, seed).map_err(|e| e.to_string())?;
        let dir = out.join("labelers").join(e.name.key());
        write_json(
            &dir.join("manifest.json"),
            &serde_json::json!({
                "encoder": e,
                "seed": seed,
                "model_config": Labeler::model_config(ctx.cfg, e),
                "fingerprint": l.fingerprint(),
                "dev": l.dev,
                "training": l.outcome,
            }),
        )
        .map_err(|e| e.to_string())?;
        Ok(l)
    });
    usable.iter().map(|e| e.name).zip(trained).collect()
}

fn run_jobs(
    ctx: &StudyContext<'_>,
    study: Study,
    jobs: &[CellJob<'_>],
    labelers: &BTreeMap<EncoderName, std::result::Result<Labeler, String>>,
    out: &Path,
) -> Vec<CellOutcome> {
    run_queue(jobs, ctx.cfg.workers, |job| {
        let dir = out.join("cells").join(&job.id);
        let (labeler, labeler_err) = match labelers.get(&job.encoder.name) {
            Some(Ok(l)) => (Some(l), None),
            Some(Err(e)) => (None, Some(e)),
            None => (None, None),
        };
        let mut c = run_cell(ctx, study, job, labeler, &dir);
        if let (CellStatus::Failed(_), Some(e)) = (&c.status, labeler_err) {
            c.status = CellStatus::Failed(format!("labeler failed: {e}"));
        }
        if let Err(e) = write_json(&dir.join("cell.json"), &c) {
            log::error!("writing cell {}: {e}", job.id);
        }
        c
    })
}

fn records_jsonl(study: Study, cells: &[CellOutcome]) -> Result<String> {
    let mut s = String::new();
    for c in cells {
        let base = serde_json::json!({
            "study": study.key(),
            "cell": c.id,
            "architecture": c.architecture,
            "encoder": c.encoder,
            "fraction": c.fraction,
            "train_size": c.train_size,
        });
        let Some(r) = &c.result else {
            let mut v = base;
            v["status"] = serde_json::to_value(&c.status)?;
            s.push_str(&serde_json::to_string(&v)?);
            s.push('\n');
            continue;
        };
        for run in &r.runs {
            for (set, m) in &run.reports {
                let mut v = base.clone();
                v["seed"] = run.seed.into();
                v["eval_set"] = set.clone().into();
                v["f1"] = m.f1.into();
                v["accuracy"] = m.accuracy.into();
                v["manifest"] = run.manifest["path"].clone();
                s.push_str(&serde_json::to_string(&v)?);
                s.push('\n');
            }
        }
        for (set, m) in &r.mean {
            let mut v = base.clone();
            v["seed"] = "mean".into();
            v["eval_set"] = set.clone().into();
            v["f1"] = m.f1.into();
            v["accuracy"] = m.accuracy.into();
            s.push_str(&serde_json::to_string(&v)?);
            s.push('\n');
        }
    }
    Ok(s)
}

fn grid_for(title: &str, cells: &[CellOutcome], encoders: &[EncoderIdentity], eval_set: &str) -> ResultsGrid {
    let rows: Vec<&str> = Architecture::ALL.iter().map(|a| a.display_name()).collect();
    let cols: Vec<&str> = encoders.iter().map(|e| e.name.display_name()).collect();
    let mut g = ResultsGrid::new(title, &rows, &cols);
    for c in cells {
        if let Some(m) = c.mean(eval_set) {
            g.insert(c.architecture.display_name(), c.encoder.display_name(), m.clone());
        }
    }
    g
}

fn flagged(cells: &[CellOutcome]) -> String {
    let mut s = String::new();
    for c in cells {
        match &c.status {
            CellStatus::Done => {}
            CellStatus::Skipped(r) => s.push_str(&format!("skipped {}: {r}\n", c.id)),
            CellStatus::Failed(r) => s.push_str(&format!("FAILED {}: {r}\n", c.id)),
        }
    }
    s
}

fn write_grids(out: &Path, grids: &[(&str, &ResultsGrid)], footer: &str) -> Result<()> {
    let mut all = BTreeMap::new();
    for (file, g) in grids {
        let mut text = g.render();
        if !footer.is_empty() {
            text.push('\n');
            text.push_str(footer);
        }
        write_atomic(&out.join(format!("{file}.txt")), text.as_bytes())?;
        all.insert(file.to_string(), (*g).clone());
    }
    write_json(&out.join("grids.json"), &all)
}

#[derive(Debug, Clone)]
pub struct PrimaryReport {
    pub minority_test: ResultsGrid,
    pub stress_test: ResultsGrid,
    pub minority_dev: ResultsGrid,
    pub cells: Vec<CellOutcome>,
}

impl PrimaryReport {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| matches!(c.status, CellStatus::Failed(_))).count()
    }
}

/// Every architecture with every configured encoder: tuned on the minority
/// dev set, trained on the stress training set, scored on both test sets.
pub fn primary_matrix(ctx: &StudyContext<'_>, out: &Path) -> Result<PrimaryReport> {
    let c = ctx.corpora;
    let names = [
        (format!("{}/test", c.minority.name), &c.minority.test),
        (format!("{}/test", c.stress.name), &c.stress.test),
        (format!("{}/dev", c.minority.name), &c.minority.dev),
    ];
    let mut jobs = Vec::new();
    for arch in Architecture::ALL {
        for enc in &ctx.cfg.encoders {
            jobs.push(CellJob {
                id: format!("{}-{}", arch.key(), enc.name.key()),
                architecture: arch,
                encoder: enc.clone(),
                fraction: None,
                split: &c.stress,
                dev: DevChoice::Minority,
                evals: names.iter().map(|(n, s)| (n.clone(), s.as_slice())).collect(),
            });
        }
    }
    let labelers = train_labelers(ctx, &ctx.cfg.encoders, out);
    let cells = run_jobs(ctx, Study::Primary, &jobs, &labelers, out);
    let mut minority_test = grid_for("Minority stress test", &cells, &ctx.cfg.encoders, &names[0].0);
    minority_test.reference = Some(("Prior best".into(), reference::PRIOR_SOTA_MINORITY_F1));
    let stress_test = grid_for("Psychological stress test", &cells, &ctx.cfg.encoders, &names[1].0);
    let minority_dev = grid_for("Minority stress dev", &cells, &ctx.cfg.encoders, &names[2].0);
    write_atomic(&out.join("results.jsonl"), records_jsonl(Study::Primary, &cells)?.as_bytes())?;
    write_grids(
        out,
        &[
            ("minority_test", &minority_test),
            ("stress_test", &stress_test),
            ("minority_dev", &minority_dev),
        ],
        &flagged(&cells),
    )?;
    Ok(PrimaryReport {
        minority_test,
        stress_test,
        minority_dev,
        cells,
    })
}

pub const REDUCTION_ARCHITECTURES: [Architecture; 2] = [Architecture::SingleTask, Architecture::Multi];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub architecture: Architecture,
    pub encoder: EncoderName,
    pub fraction: f64,
    pub train_size: usize,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ReductionReport {
    pub points: Vec<CurvePoint>,
    pub cells: Vec<CellOutcome>,
}

impl ReductionReport {
    pub fn f1_at(&self, arch: Architecture, enc: EncoderName, fraction: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.architecture == arch && p.encoder == enc && (p.fraction - fraction).abs() < 1e-9)
            .map(|p| p.f1)
    }
}

/// Single-Task and Multi trained on stratified subsets of the stress
/// training set, tuned on the stress dev set, scored on the stress test set.
pub fn data_reduction_study(ctx: &StudyContext<'_>, out: &Path) -> Result<ReductionReport> {
    let c = ctx.corpora;
    let full = c.stress.train.len();
    let reduced: Vec<(f64, DatasetSplit)> = ctx
        .cfg
        .reduction
        .fractions
        .iter()
        .map(|&f| Ok((f, reduce_training_set(&c.stress, &ctx.cfg.reduction.plan(f, full)?)?)))
        .collect::<Result<_>>()?;
    let test_name = format!("{}/test", c.stress.name);
    let mut jobs = Vec::new();
    for (f, split) in &reduced {
        for arch in REDUCTION_ARCHITECTURES {
            for enc in &ctx.cfg.encoders {
                jobs.push(CellJob {
                    id: format!("{}-{}-f{:03}", arch.key(), enc.name.key(), (f * 100.0).round() as u32),
                    architecture: arch,
                    encoder: enc.clone(),
                    fraction: Some(*f),
                    split,
                    dev: DevChoice::Stress,
                    evals: vec![(test_name.clone(), c.stress.test.as_slice())],
                });
            }
        }
    }
    let labelers = train_labelers(ctx, &ctx.cfg.encoders, out);
    let cells = run_jobs(ctx, Study::Reduction, &jobs, &labelers, out);
    let points: Vec<CurvePoint> = cells
        .iter()
        .filter_map(|c| {
            c.mean(&test_name).map(|m| CurvePoint {
                architecture: c.architecture,
                encoder: c.encoder,
                fraction: c.fraction.unwrap_or(1.0),
                train_size: c.train_size,
                f1: m.f1,
                accuracy: m.accuracy,
            })
        })
        .collect();
    write_atomic(&out.join("results.jsonl"), records_jsonl(Study::Reduction, &cells)?.as_bytes())?;
    let mut csv = String::from("architecture,encoder,fraction,train_size,f1,accuracy\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{:.2},{},{:.2},{:.2}\n",
            p.architecture.key(),
            p.encoder.key(),
            p.fraction,
            p.train_size,
            p.f1,
            p.accuracy
        ));
    }
    write_atomic(&out.join("reduction.csv"), csv.as_bytes())?;
    let mut text = String::new();
    for (f, split) in &reduced {
        let rows: Vec<&str> = REDUCTION_ARCHITECTURES.iter().map(|a| a.display_name()).collect();
        let cols: Vec<&str> = ctx.cfg.encoders.iter().map(|e| e.name.display_name()).collect();
        let mut g = ResultsGrid::new(
            &format!("{:.0}% of training data ({} examples)", f * 100.0, split.train.len()),
            &rows,
            &cols,
        );
        for c in cells.iter().filter(|c| c.fraction == Some(*f)) {
            if let Some(m) = c.mean(&test_name) {
                g.insert(c.architecture.display_name(), c.encoder.display_name(), m.clone());
            }
        }
        text.push_str(&g.render());
        text.push('\n');
    }
    text.push_str(&flagged(&cells));
    write_atomic(&out.join("reduction.txt"), text.as_bytes())?;
    plot_reduction(&points, &out.join("reduction.svg"))?;
    Ok(ReductionReport { points, cells })
}

fn plot_err(e: impl fmt::Display) -> Error {
    Error::Experiment(format!("plotting: {e}"))
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

/// F1 against training fraction, one line per architecture and encoder.
pub fn plot_reduction(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut series: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for p in points {
        series
            .entry((p.architecture.display_name().into(), p.encoder.display_name().into()))
            .or_default()
            .push((p.fraction * 100.0, p.f1));
    }
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.f1), b.max(p.f1)));
    let (lo, hi) = if lo.is_finite() { ((lo - 5.0).max(0.0), (hi + 5.0).min(100.0)) } else { (0.0, 100.0) };
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (800, 520)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Stress test F1 by training fraction", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..105.0, lo..hi)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("training data (%)")
            .y_desc("F1")
            .draw()
            .map_err(plot_err)?;
        for (i, ((arch, enc), mut pts)) in series.into_iter().enumerate() {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(format!("{arch} / {enc}"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write_atomic(path, svg.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistribution {
    pub corpus: String,
    /// `None` for the whole corpus.
    pub stressed: Option<bool>,
    pub n: usize,
    pub proportions: [f64; NUM_EMOTIONS],
}

/// Share of examples carrying each label. Multi-label, so shares need not sum to 1.
pub fn emotion_proportions(vectors: &[EmotionVector]) -> [f64; NUM_EMOTIONS] {
    let mut p = [0.0; NUM_EMOTIONS];
    if vectors.is_empty() {
        return p;
    }
    for v in vectors {
        for l in v.active() {
            p[l.index()] += 1.0;
        }
    }
    p.map(|c| c / vectors.len() as f64)
}

pub fn l1_distance(a: &[f64; NUM_EMOTIONS], b: &[f64; NUM_EMOTIONS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionReport {
    pub labeler_dev: MetricReport,
    pub labeler_test: MetricReport,
    pub groups: Vec<GroupDistribution>,
    pub corpus_level: Vec<GroupDistribution>,
    pub cross_corpus_l1: f64,
    pub within_corpus_l1: BTreeMap<String, f64>,
    /// Cross-corpus divergence exceeds every within-corpus stress/non-stress divergence.
    pub ordering_holds: bool,
}

/// Proportions per (corpus, stress status) and the L1 divergences between them.
/// Each corpus is labelled by the frozen `labeler`.
pub fn distribution_summary(
    labeler: &Labeler,
    corpora: &[(&str, &[TextExample])],
    threshold: f64,
) -> Result<(Vec<GroupDistribution>, Vec<GroupDistribution>, f64, BTreeMap<String, f64>)> {
    if corpora.len() != 2 {
        return Err(Error::Experiment("the distribution study compares exactly two corpora".into()));
    }
    let mut groups = Vec::new();
    let mut level = Vec::new();
    let mut within = BTreeMap::new();
    for (name, examples) in corpora {
        let labelled = labeler.label(examples, threshold)?;
        let of = |f: &dyn Fn(&TextExample) -> bool| -> Vec<EmotionVector> {
            labelled.iter().filter(|e| f(e)).filter_map(|e| e.emotion_vector).collect()
        };
        let all = of(&|_| true);
        level.push(GroupDistribution {
            corpus: name.to_string(),
            stressed: None,
            n: all.len(),
            proportions: emotion_proportions(&all),
        });
        let mut pair = Vec::new();
        for stressed in [false, true] {
            let v = of(&|e| e.stress_label == Some(StressLabel::from_bool(stressed)));
            let g = GroupDistribution {
                corpus: name.to_string(),
                stressed: Some(stressed),
                n: v.len(),
                proportions: emotion_proportions(&v),
            };
            pair.push(g.proportions);
            groups.push(g);
        }
        within.insert(name.to_string(), l1_distance(&pair[0], &pair[1]));
    }
    let cross = l1_distance(&level[0].proportions, &level[1].proportions);
    Ok((groups, level, cross, within))
}

/// Pseudo-labels every partition of the stress and minority corpora with an
/// emotion model trained on the emotion corpus, then compares distributions.
pub fn emotion_distribution_study(
    ctx: &StudyContext<'_>,
    encoder: &EncoderIdentity,
    out: &Path,
) -> Result<DistributionReport> {
    encoder_status(ctx.cfg, encoder).map_err(Error::Experiment)?;
    let seed = ctx.cfg.seed_set().seeds()[0];
    let labeler = Labeler::train(ctx, encoder, seed)?;
    let c = ctx.corpora;
    let test_name = format!("{}/test", c.emotion.name);
    let labeler_test = evaluate_emotion(&labeler.model, &test_name, &c.emotion.test, ctx.cfg.emotion_threshold)?;
    let stress_all: Vec<TextExample> = [&c.stress.train, &c.stress.dev, &c.stress.test]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    let minority_all: Vec<TextExample> = [&c.minority.train, &c.minority.dev, &c.minority.test]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    let (groups, corpus_level, cross, within) = distribution_summary(
        &labeler,
        &[(&c.stress.name, &stress_all), (&c.minority.name, &minority_all)],
        ctx.cfg.emotion_threshold,
    )?;
    let ordering_holds = within.values().all(|w| cross > *w);
    let report = DistributionReport {
        labeler_dev: labeler.dev.clone(),
        labeler_test,
        groups,
        corpus_level,
        cross_corpus_l1: cross,
        within_corpus_l1: within,
        ordering_holds,
    };
    let mut csv = String::from("corpus,group,n,label,proportion\n");
    for g in report.groups.iter().chain(&report.corpus_level) {
        let group = match g.stressed {
            Some(true) => "stressed",
            Some(false) => "not_stressed",
            None => "all",
        };
        for l in CoarseEmotion::ALL {
            csv.push_str(&format!("{},{group},{},{},{:.4}\n", g.corpus, g.n, l.name(), g.proportions[l.index()]));
        }
    }
    write_atomic(&out.join("distribution.csv"), csv.as_bytes())?;
    let mut manifest = manifest_header(ctx, Study::Emotions.key());
    let m = manifest.as_object_mut().expect("object");
    m.insert("seed".into(), seed.into());
    m.insert("encoder".into(), serde_json::to_value(encoder)?);
    m.insert("labeler_fingerprint".into(), labeler.fingerprint().into());
    m.insert("labeler_training".into(), labeler.outcome.clone());
    m.insert("report".into(), serde_json::to_value(&report)?);
    write_json(&out.join("manifest.json"), &manifest)?;
    let summary = format!(
        "labeler macro F1: dev {:.2}, test {:.2} (reference {:.2})\n\
         cross-corpus L1: {:.4}\n{}\
         cross-corpus divergence exceeds within-corpus divergence: {}\n",
        report.labeler_dev.f1,
        report.labeler_test.f1,
        reference::LABELER_MACRO_F1,
        report.cross_corpus_l1,
        report
            .within_corpus_l1
            .iter()
            .map(|(k, v)| format!("within {k} L1: {v:.4}\n"))
            .collect::<String>(),
        report.ordering_holds,
    );
    write_atomic(&out.join("distribution.txt"), summary.as_bytes())?;
    plot_distribution(&report.groups, &out.join("distribution.svg"))?;
    Ok(report)
}

/// Grouped bars: one group per label, one bar per (corpus, stress status).
pub fn plot_distribution(groups: &[GroupDistribution], path: &Path) -> Result<()> {
    let k = groups.len().max(1);
    let width = 0.8 / k as f64;
    let top = groups
        .iter()
        .flat_map(|g| g.proportions)
        .fold(0.0f64, f64::max)
        .max(0.1)
        * 1.15;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (900, 520)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Predicted emotion proportions", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..NUM_EMOTIONS as f64, 0.0..top.min(1.0))
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(NUM_EMOTIONS * 2 + 1)
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                if (x - i as f64 - 0.5).abs() < 1e-6 && i < NUM_EMOTIONS {
                    CoarseEmotion::ALL[i].name().to_string()
                } else {
                    String::new()
                }
            })
            .y_desc("share of posts")
            .draw()
            .map_err(plot_err)?;
        for (j, g) in groups.iter().enumerate() {
            let color = PALETTE[j % PALETTE.len()];
            let label = format!(
                "{} / {}",
                g.corpus,
                match g.stressed {
                    Some(true) => "stressed",
                    Some(false) => "not stressed",
                    None => "all",
                }
            );
            chart
                .draw_series((0..NUM_EMOTIONS).map(|i| {
                    let x0 = i as f64 + 0.1 + j as f64 * width;
                    Rectangle::new([(x0, 0.0), (x0 + width, g.proportions[i])], color.filled())
                }))
                .map_err(plot_err)?
                .label(label)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write_atomic(path, svg.as_bytes())
}

/// What a study would do, without doing it.
#[derive(Debug, Clone, Serialize)]
pub struct Plan {
    pub study: Study,
    pub output: PathBuf,
    pub inputs: Vec<(PathBuf, bool)>,
    pub encoders: Vec<(EncoderName, std::result::Result<(), String>)>,
    pub cells: Vec<String>,
    pub trials_per_cell: usize,
    pub seeds: Vec<u64>,
    pub training_runs: usize,
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "study: {}", self.study.key())?;
        writeln!(f, "output: {}", self.output.display())?;
        for (p, ok) in &self.inputs {
            writeln!(f, "input {} {}", p.display(), if *ok { "ok" } else { "MISSING" })?;
        }
        for (e, s) in &self.encoders {
            match s {
                Ok(()) => writeln!(f, "encoder {e}: ok")?,
                Err(r) => writeln!(f, "encoder {e}: unavailable ({r})")?,
            }
        }
        writeln!(f, "cells: {}", self.cells.len())?;
        for c in &self.cells {
            writeln!(f, "  {c}")?;
        }
        writeln!(f, "trials per cell: {}", self.trials_per_cell)?;
        writeln!(f, "seeds: {:?}", self.seeds)?;
        writeln!(f, "training runs (upper bound): {}", self.training_runs)
    }
}

pub fn plan(cfg: &RunConfig, study: Study, out: &Path) -> Plan {
    let encoders: Vec<_> = cfg.encoders.iter().map(|e| (e.name, encoder_status(cfg, e))).collect();
    let mut cells = Vec::new();
    match study {
        Study::Primary => {
            for a in Architecture::ALL {
                for e in &cfg.encoders {
                    cells.push(format!("{}-{}", a.key(), e.name.key()));
                }
            }
        }
        Study::Reduction => {
            for f in &cfg.reduction.fractions {
                for a in REDUCTION_ARCHITECTURES {
                    for e in &cfg.encoders {
                        cells.push(format!("{}-{}-f{:03}", a.key(), e.name.key(), (f * 100.0).round() as u32));
                    }
                }
            }
        }
        Study::Emotions => {
            let e = cfg.distribution_encoder.unwrap_or(cfg.encoders[0].name);
            cells.push(format!("labeler-{}", e.key()));
        }
    }
    let seeds = cfg.seeds.clone();
    let (trials, runs) = match study {
        Study::Emotions => (0, 1),
        _ => {
            let labelers = if study == Study::Primary || study == Study::Reduction { cfg.encoders.len() } else { 0 };
            (cfg.budget, cells.len() * (cfg.budget + seeds.len()) + labelers)
        }
    };
    Plan {
        study,
        output: out.to_path_buf(),
        inputs: cfg.input_files().into_iter().map(|p| {
            let ok = p.exists();
            (p, ok)
        }).collect(),
        encoders,
        cells,
        trials_per_cell: trials,
        seeds,
        training_runs: runs,
    }
}

/// Re-renders the text grids of a finished study from its `grids.json`.
pub fn rerender(out: &Path) -> Result<BTreeMap<String, String>> {
    let path = out.join("grids.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let grids: BTreeMap<String, ResultsGrid> = serde_json::from_str(&text)?;
    Ok(grids.into_iter().map(|(k, g)| (k, g.render())).collect())
}

/// Compact seed-mean line for logs.
pub fn describe(c: &CellOutcome) -> String {
    match (&c.status, &c.result) {
        (CellStatus::Done, Some(r)) => {
            let parts: Vec<String> = r
                .mean
                .iter()
                .map(|(k, m)| format!("{k} F1 {:.2}", round2(m.f1)))
                .collect();
            format!("{}: {}", c.id, parts.join(", "))
        }
        (CellStatus::Skipped(r), _) => format!("{}: skipped ({r})", c.id),
        (CellStatus::Failed(r), _) => format!("{}: failed ({r})", c.id),
        _ => format!("{}: no result", c.id),
    }
}
