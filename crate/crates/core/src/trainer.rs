//! Training loops for the four architectures, early stopping, seeding,
//! resumable state and pseudo-labelling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ForwardCtx, Tape};
use crate::corpus::{Source, StressLabel, TextExample, TrainDev};
use crate::emotaxonomy::EmotionVector;
use crate::encoder::{Encoder, EncoderCheckpoint};
use crate::error::{Error, Result};
use crate::evalkit::{binary_f1, macro_f1, MetricReport};
use crate::models::{
    combined_loss_node, emotion_loss_node, predict_emotions, predict_stress, stress_loss_node,
    AssembledModel, Architecture, ModelConfig, Task, DEFAULT_EMOTION_THRESHOLD,
};
use crate::params::{Adam, AdamConfig};
use crate::safetensors;
use crate::tokenize::TokenizedInput;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopPolicy {
    pub max_epochs: usize,
    pub patience: usize,
    pub tolerance: f64,
}

impl Default for EarlyStopPolicy {
    fn default() -> Self {
        Self {
            max_epochs: 20,
            patience: 5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    MaxSteps,
}

/// Patience counter. An epoch counts as an improvement only when it beats the
/// reference by strictly more than the tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopTracker {
    policy: EarlyStopPolicy,
    epochs: usize,
    reference: Option<f64>,
    wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: Option<StopReason>,
}

// absorbs representation error so that a gain of exactly `tolerance` never counts
const TOLERANCE_SLACK: f64 = 1e-12;

impl EarlyStopTracker {
    pub fn new(policy: EarlyStopPolicy) -> Self {
        Self {
            policy,
            epochs: 0,
            reference: None,
            wait: 0,
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn observe(&mut self, metric: f64) -> StopDecision {
        self.epochs += 1;
        let improved = match self.reference {
            None => true,
            Some(r) => metric - r > self.policy.tolerance + TOLERANCE_SLACK,
        };
        if improved {
            self.reference = Some(metric);
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        let stop = if self.wait >= self.policy.patience {
            Some(StopReason::Patience)
        } else if self.epochs >= self.policy.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        StopDecision { improved, stop }
    }
}

/// Epoch (1-based) after which a scripted metric sequence stops training.
pub fn stop_epoch(policy: EarlyStopPolicy, metrics: &[f64]) -> Option<(usize, StopReason)> {
    let mut t = EarlyStopTracker::new(policy);
    for &m in metrics {
        if let Some(r) = t.observe(m).stop {
            return Some((t.epochs(), r));
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet(Vec<u64>);

impl SeedSet {
    pub const DEFAULT: [u64; 3] = [13, 42, 2024];

    pub fn new(seeds: Vec<u64>) -> Result<Self> {
        if seeds.len() != 3 {
            return Err(Error::Config(format!(
                "reported results use exactly 3 seeds, got {}",
                seeds.len()
            )));
        }
        Ok(Self(seeds))
    }

    pub fn seeds(&self) -> &[u64] {
        &self.0
    }
}

impl Default for SeedSet {
    fn default() -> Self {
        Self(Self::DEFAULT.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub policy: EarlyStopPolicy,
    /// Hard cap on optimizer steps per training stage.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "one")]
    pub emotion_loss_scale: f64,
    #[serde(default = "default_threshold")]
    pub emotion_threshold: f64,
    #[serde(default = "default_root")]
    pub asset_root: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn default_threshold() -> f64 {
    DEFAULT_EMOTION_THRESHOLD
}

fn default_root() -> PathBuf {
    PathBuf::from(".")
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 16,
            policy: EarlyStopPolicy::default(),
            max_steps: None,
            emotion_loss_scale: 1.0,
            emotion_threshold: DEFAULT_EMOTION_THRESHOLD,
            asset_root: default_root(),
        }
    }
}

/// What a training loop optimizes and which dev metric it monitors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Stress,
    Emotion,
    Alternating,
    Joint { lambda: f64 },
}

impl Regime {
    fn monitor(self) -> Task {
        match self {
            Regime::Emotion => Task::Emotion,
            _ => Task::Stress,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub improved: bool,
}

/// Persistent shuffled iterator over the auxiliary emotion set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    pub fn new(n: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    /// Next `size` indices, reshuffling whenever the set is exhausted.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Batch-level task order for one alternating epoch: S, E, S, E, ...
pub fn alternation_schedule(stress_batches: usize) -> Vec<Task> {
    (0..stress_batches)
        .flat_map(|_| [Task::Stress, Task::Emotion])
        .collect()
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub regime: Regime,
    pub seed: u64,
    pub epoch: usize,
    pub steps: usize,
    pub tracker: EarlyStopTracker,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub shuffle_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    pub cycler: Option<Cycler>,
    pub finished: Option<StopReason>,
    pub adam: Adam,
    pub model: AssembledModel,
    pub best: Option<AssembledModel>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    regime: Regime,
    seed: u64,
    epoch: usize,
    steps: usize,
    tracker: EarlyStopTracker,
    best_metric: Option<f64>,
    best_epoch: usize,
    history: Vec<EpochRecord>,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    cycler: Option<Cycler>,
    finished: Option<StopReason>,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

impl TrainState {
    pub fn new(regime: Regime, model: AssembledModel, policy: EarlyStopPolicy, seed: u64) -> Self {
        let adam = Adam::new(AdamConfig::with_lr(model.config().learning_rate));
        Self {
            regime,
            seed,
            epoch: 0,
            steps: 0,
            tracker: EarlyStopTracker::new(policy),
            best_metric: None,
            best_epoch: 0,
            history: Vec::new(),
            shuffle_rng: stream(seed, 1),
            dropout_rng: stream(seed, 2),
            cycler: None,
            finished: None,
            adam,
            model,
            best: None,
        }
    }

    /// Writes `state.json`, `optimizer.safetensors`, `model.safetensors` and,
    /// once an epoch has been evaluated, `best.safetensors` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let file = StateFile {
            regime: self.regime,
            seed: self.seed,
            epoch: self.epoch,
            steps: self.steps,
            tracker: self.tracker.clone(),
            best_metric: self.best_metric,
            best_epoch: self.best_epoch,
            history: self.history.clone(),
            shuffle_rng: self.shuffle_rng.clone(),
            dropout_rng: self.dropout_rng.clone(),
            cycler: self.cycler.clone(),
            finished: self.finished,
        };
        let none = serde_json::Value::Null;
        self.model.save(&dir.join("model.safetensors"), &none)?;
        if let Some(b) = &self.best {
            b.save(&dir.join("best.safetensors"), &none)?;
        }
        safetensors::write_atomic(&dir.join("optimizer.safetensors"), &self.adam.to_bytes())?;
        safetensors::write_atomic(
            &dir.join("state.json"),
            serde_json::to_string_pretty(&file)?.as_bytes(),
        )
    }

    pub fn load(dir: &Path, asset_root: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("state.json"))
            .map_err(|e| Error::io(format!("reading {}/state.json", dir.display()), e))?;
        let f: StateFile = serde_json::from_str(&text)?;
        let opt = fs::read(dir.join("optimizer.safetensors"))
            .map_err(|e| Error::io("reading optimizer state", e))?;
        let (model, _) = AssembledModel::load(&dir.join("model.safetensors"), asset_root)?;
        let best_path = dir.join("best.safetensors");
        let best = if best_path.exists() {
            Some(AssembledModel::load(&best_path, asset_root)?.0)
        } else {
            None
        };
        Ok(Self {
            regime: f.regime,
            seed: f.seed,
            epoch: f.epoch,
            steps: f.steps,
            tracker: f.tracker,
            best_metric: f.best_metric,
            best_epoch: f.best_epoch,
            history: f.history,
            shuffle_rng: f.shuffle_rng,
            dropout_rng: f.dropout_rng,
            cycler: f.cycler,
            finished: f.finished,
            adam: Adam::from_bytes(&opt)?,
            model,
            best,
        })
    }
}

struct Prepared<'a> {
    examples: &'a [TextExample],
    inputs: Vec<TokenizedInput>,
}

fn prepare<'a>(model: &AssembledModel, examples: &'a [TextExample]) -> Result<Prepared<'a>> {
    let inputs = examples
        .iter()
        .map(|e| model.encoder().tokenize(&e.text))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { examples, inputs })
}

fn require_labels(examples: &[TextExample], task: Task, what: &str) -> Result<()> {
    for e in examples {
        let ok = match task {
            Task::Stress => e.stress_label.is_some(),
            Task::Emotion => e.emotion_vector.is_some_and(|v| !v.is_empty()),
        };
        if !ok {
            return Err(Error::Training(format!(
                "{what}: example `{}` lacks a {task:?} target",
                e.id
            )));
        }
    }
    Ok(())
}

/// Per-term losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub stress: Option<f64>,
    pub emotion: Option<f64>,
    pub total: f64,
}

/// A running training loop over fixed data.
pub struct Session<'d> {
    state: TrainState,
    primary: Prepared<'d>,
    aux: Option<Prepared<'d>>,
    dev: Prepared<'d>,
    opts: TrainOptions,
    access: Vec<(String, String)>,
}

impl<'d> Session<'d> {
    /// `data.train` drives the epoch; `aux` is the emotion set cycled through
    /// by the alternating regime.
    pub fn start(
        regime: Regime,
        model: AssembledModel,
        data: &TrainDev<'d>,
        aux: Option<(&str, &'d [TextExample])>,
        opts: &TrainOptions,
        seed: u64,
    ) -> Result<Self> {
        let state = TrainState::new(regime, model, opts.policy, seed);
        Self::resume(state, data, aux, opts)
    }

    pub fn resume(
        mut state: TrainState,
        data: &TrainDev<'d>,
        aux: Option<(&str, &'d [TextExample])>,
        opts: &TrainOptions,
    ) -> Result<Self> {
        if state.model.is_frozen() {
            return Err(Error::Training("cannot train a frozen model".into()));
        }
        if opts.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if data.train.is_empty() {
            return Err(Error::Training(format!("{} is empty", data.train_name)));
        }
        if data.dev.is_empty() {
            return Err(Error::Training(format!("{} is empty", data.dev_name)));
        }
        let regime = state.regime;
        let monitor = regime.monitor();
        match regime {
            Regime::Stress | Regime::Alternating => require_labels(data.train, Task::Stress, "train")?,
            Regime::Emotion => require_labels(data.train, Task::Emotion, "train")?,
            Regime::Joint { lambda } => {
                crate::models::combined_loss(0.0, 0.0, lambda)?;
                require_labels(data.train, Task::Stress, "train")?;
                require_labels(data.train, Task::Emotion, "joint train (pseudo labels)")?;
            }
        }
        require_labels(data.dev, monitor, "dev")?;
        let mut access = data.access_log();
        let aux = match (regime, aux) {
            (Regime::Alternating, Some((name, ex))) => {
                if ex.is_empty() {
                    return Err(Error::Training(format!("{name} is empty")));
                }
                require_labels(ex, Task::Emotion, name)?;
                access.push((name.to_string(), crate::corpus::content_checksum(ex)));
                if state.cycler.is_none() {
                    state.cycler = Some(Cycler::new(ex.len(), stream(state.seed, 3)));
                }
                Some(prepare(&state.model, ex)?)
            }
            (Regime::Alternating, None) => {
                return Err(Error::Training("alternating training needs emotion data".into()))
            }
            _ => None,
        };
        Ok(Self {
            primary: prepare(&state.model, data.train)?,
            dev: prepare(&state.model, data.dev)?,
            aux,
            opts: opts.clone(),
            state,
            access,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn step(&mut self, task_batch: Task, joint: bool, idx: &[usize], from_aux: bool) -> Result<f64> {
        let data = if from_aux {
            self.aux.as_ref().expect("aux prepared")
        } else {
            &self.primary
        };
        let batch: Vec<&TokenizedInput> = idx.iter().map(|&i| &data.inputs[i]).collect();
        let examples: Vec<&TextExample> = idx.iter().map(|&i| &data.examples[i]).collect();
        let st = &mut self.state;
        let (epoch, step) = (st.epoch + 1, st.steps + 1);
        let diverged = |loss: f64| Error::Divergence { epoch, step, loss };
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train(&mut st.dropout_rng);
        let tasks: &[Task] = if joint {
            &[Task::Stress, Task::Emotion]
        } else if task_batch == Task::Stress {
            &[Task::Stress]
        } else {
            &[Task::Emotion]
        };
        let out = st.model.forward(&mut tape, &batch, tasks, &mut ctx).map_err(|e| match e {
            Error::NonFinite(_) => diverged(f64::NAN),
            other => other,
        })?;
        let nonfinite = |e: Error| match e {
            Error::NonFinite(_) => diverged(f64::NAN),
            other => other,
        };
        let stress_gold = || -> Vec<StressLabel> {
            examples.iter().map(|e| e.stress_label.expect("checked")).collect()
        };
        let emotion_gold = || -> Vec<EmotionVector> {
            examples.iter().map(|e| e.emotion_vector.expect("checked")).collect()
        };
        let loss = if joint {
            let lambda = match st.regime {
                Regime::Joint { lambda } => lambda,
                _ => unreachable!("joint step outside joint regime"),
            };
            let ls = stress_loss_node(&mut tape, out.stress.unwrap(), &stress_gold()).map_err(nonfinite)?;
            let le = emotion_loss_node(&mut tape, out.emotion.unwrap(), &emotion_gold()).map_err(nonfinite)?;
            let le = tape.scale(le, self.opts.emotion_loss_scale);
            combined_loss_node(&mut tape, ls, le, lambda)?
        } else if task_batch == Task::Stress {
            stress_loss_node(&mut tape, out.stress.unwrap(), &stress_gold()).map_err(nonfinite)?
        } else {
            let le = emotion_loss_node(&mut tape, out.emotion.unwrap(), &emotion_gold()).map_err(nonfinite)?;
            tape.scale(le, self.opts.emotion_loss_scale)
        };
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(diverged(value));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        let mut stores = st.model.stores_mut()?;
        st.adam.update(&mut stores, &grads).map_err(|e| match e {
            Error::NonFinite(_) => diverged(value),
            other => other,
        })?;
        st.steps += 1;
        Ok(value)
    }

    fn cap_reached(&self) -> bool {
        self.opts.max_steps.is_some_and(|m| self.state.steps >= m)
    }

    fn dev_metric(&self) -> Result<f64> {
        let model = &self.state.model;
        let ex = self.dev.examples;
        match self.state.regime.monitor() {
            Task::Stress => {
                let preds = predict_stress(model, &self.dev.inputs)?;
                let p: Vec<bool> = preds.iter().map(|p| p.label.is_positive()).collect();
                let g: Vec<bool> = ex.iter().map(|e| e.stress_label.unwrap().is_positive()).collect();
                Ok(binary_f1(&p, &g)?.value)
            }
            Task::Emotion => {
                let preds = predict_emotions(model, &self.dev.inputs, self.opts.emotion_threshold)?;
                let g: Vec<EmotionVector> = ex.iter().map(|e| e.emotion_vector.unwrap()).collect();
                Ok(macro_f1(&preds, &g)?.value)
            }
        }
    }

    /// Runs one epoch and its dev evaluation. Returns the stop reason once
    /// training is over.
    pub fn run_epoch(&mut self) -> Result<Option<StopReason>> {
        if let Some(r) = self.state.finished {
            return Ok(Some(r));
        }
        let mut order: Vec<usize> = (0..self.primary.inputs.len()).collect();
        order.shuffle(&mut self.state.shuffle_rng);
        let bs = self.opts.batch_size;
        let regime = self.state.regime;
        let mut losses = Vec::new();
        let mut capped = false;
        for chunk in order.chunks(bs) {
            if self.cap_reached() {
                capped = true;
                break;
            }
            let l = match regime {
                Regime::Stress => self.step(Task::Stress, false, chunk, false)?,
                Regime::Emotion => self.step(Task::Emotion, false, chunk, false)?,
                Regime::Joint { .. } => self.step(Task::Stress, true, chunk, false)?,
                Regime::Alternating => {
                    let s = self.step(Task::Stress, false, chunk, false)?;
                    if self.cap_reached() {
                        losses.push(s);
                        capped = true;
                        break;
                    }
                    let idx = self.state.cycler.as_mut().expect("cycler").next_batch(bs);
                    let e = self.step(Task::Emotion, false, &idx, true)?;
                    losses.push(e);
                    s
                }
            };
            losses.push(l);
        }
        capped |= self.cap_reached();
        self.state.epoch += 1;
        let metric = self.dev_metric()?;
        let decision = self.state.tracker.observe(metric);
        if self.state.best_metric.is_none_or(|b| metric > b) {
            self.state.best_metric = Some(metric);
            self.state.best_epoch = self.state.epoch;
            self.state.best = Some(self.state.model.clone());
        }
        let train_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        log::info!(
            "epoch {} steps {} loss {:.5} dev {:.2}",
            self.state.epoch,
            self.state.steps,
            train_loss,
            metric
        );
        self.state.history.push(EpochRecord {
            epoch: self.state.epoch,
            steps: self.state.steps,
            train_loss,
            dev_metric: metric,
            improved: decision.improved,
        });
        let reason = decision.stop.or(capped.then_some(StopReason::MaxSteps));
        self.state.finished = reason;
        Ok(reason)
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.run_epoch()?.is_none() {}
        Ok(self.finish())
    }

    fn finish(self) -> TrainOutcome {
        let st = self.state;
        TrainOutcome {
            model: st.best.unwrap_or(st.model),
            best_metric: st.best_metric.unwrap_or(f64::NAN),
            best_epoch: st.best_epoch,
            stop_reason: st.finished.unwrap_or(StopReason::MaxEpochs),
            steps: st.steps,
            seed: st.seed,
            history: st.history,
            data_access: self.access,
            transfer: None,
            stage1: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub stage1_final: String,
    pub stage2_initial: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best-dev checkpoint, not the last one.
    pub model: AssembledModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stop_reason: StopReason,
    pub steps: usize,
    pub seed: u64,
    /// Partition names and content checksums read while training.
    pub data_access: Vec<(String, String)>,
    pub transfer: Option<TransferRecord>,
    pub stage1: Option<Box<TrainOutcome>>,
}

impl TrainOutcome {
    /// Serializable summary for run manifests.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_dev_metric": self.best_metric,
            "stop_reason": self.stop_reason,
            "steps": self.steps,
            "history": self.history,
            "model_fingerprint": self.model.fingerprint(),
            "encoder_fingerprint": self.model.encoder().fingerprint(),
            "data_access": self.data_access,
            "transfer": self.transfer,
            "stage1": self.stage1.as_ref().map(|s| s.summary()),
        })
    }
}

fn fresh_encoder(config: &ModelConfig, opts: &TrainOptions) -> Result<Encoder> {
    Encoder::load(&config.encoder, &opts.asset_root)
}

pub fn train_single_task(
    config: &ModelConfig,
    task: Task,
    data: &TrainDev<'_>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    let enc = fresh_encoder(config, opts)?;
    let (model, regime) = match task {
        Task::Stress => (AssembledModel::assemble(config.clone(), enc, seed)?, Regime::Stress),
        Task::Emotion => (AssembledModel::emotion_only(config.clone(), enc, seed)?, Regime::Emotion),
    };
    if model.has(Task::Emotion) && task == Task::Stress {
        return Err(Error::Config(format!(
            "{} is not a single-task architecture",
            config.architecture
        )));
    }
    Session::start(regime, model, data, None, opts, seed)?.run()
}

/// Emotion stage first, then a fresh stress model whose encoder is the
/// stage-one encoder, bit for bit.
pub fn train_fine_tune(
    config: &ModelConfig,
    emotion: &TrainDev<'_>,
    stress: &TrainDev<'_>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    if config.architecture != Architecture::FineTune {
        return Err(Error::Config("fine-tune training needs the finetune architecture".into()));
    }
    let stage1 = train_single_task(config, Task::Emotion, emotion, opts, seed)?;
    let exported: EncoderCheckpoint = stage1.model.encoder().export_weights();
    let stage1_final = exported.fingerprint.clone();
    let mut model = AssembledModel::assemble(config.clone(), fresh_encoder(config, opts)?, seed)?;
    model.import_encoder(&exported)?;
    let stage2_initial = model.encoder().fingerprint();
    if stage2_initial != stage1_final {
        return Err(Error::Training(format!(
            "transfer fingerprint mismatch: {stage1_final} vs {stage2_initial}"
        )));
    }
    let mut out = Session::start(Regime::Stress, model, stress, None, opts, seed)?.run()?;
    out.data_access.extend(stage1.data_access.iter().cloned());
    out.transfer = Some(TransferRecord {
        stage1_final,
        stage2_initial,
    });
    out.stage1 = Some(Box::new(stage1));
    Ok(out)
}

/// Strict S, E, S, E batch alternation over one shared encoder. An epoch is
/// one pass over the stress training set.
pub fn train_alternating(
    config: &ModelConfig,
    emotion: &TrainDev<'_>,
    stress: &TrainDev<'_>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    if config.architecture != Architecture::MultiAlt {
        return Err(Error::Config("alternating training needs the multialt architecture".into()));
    }
    let model = AssembledModel::assemble(config.clone(), fresh_encoder(config, opts)?, seed)?;
    Session::start(
        Regime::Alternating,
        model,
        stress,
        Some((&emotion.train_name, emotion.train)),
        opts,
        seed,
    )?
    .run()
}

/// Adds predicted emotion vectors to stress-corpus examples.
pub fn pseudo_label_emotions(
    model: &AssembledModel,
    examples: &[TextExample],
    threshold: f64,
) -> Result<Vec<TextExample>> {
    if !model.is_frozen() {
        return Err(Error::Training("pseudo-labelling requires a frozen model".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.source == Source::Emotion) {
        return Err(Error::Training(format!(
            "example `{}` already belongs to the emotion corpus",
            e.id
        )));
    }
    let inputs = examples
        .iter()
        .map(|e| model.encoder().tokenize(&e.text))
        .collect::<Result<Vec<_>>>()?;
    let preds = predict_emotions(model, &inputs, threshold)?;
    Ok(examples
        .iter()
        .zip(preds)
        .map(|(e, v)| TextExample {
            emotion_vector: Some(v),
            emotion_is_pseudo: true,
            ..e.clone()
        })
        .collect())
}

/// Both losses on every batch, stepping on their lambda-weighted sum.
pub fn train_joint(
    config: &ModelConfig,
    data: &TrainDev<'_>,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    if config.architecture != Architecture::Multi {
        return Err(Error::Config("joint training needs the multi architecture".into()));
    }
    let lambda = config.lambda()?;
    require_labels(data.train, Task::Emotion, "joint train (pseudo labels)")?;
    let model = AssembledModel::assemble(config.clone(), fresh_encoder(config, opts)?, seed)?;
    Session::start(Regime::Joint { lambda }, model, data, None, opts, seed)?.run()
}

/// Eval-mode per-term losses on a batch; no parameters change.
pub fn batch_losses(model: &AssembledModel, examples: &[TextExample], lambda: Option<f64>) -> Result<StepLosses> {
    let inputs = examples
        .iter()
        .map(|e| model.encoder().tokenize(&e.text))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<&TokenizedInput> = inputs.iter().collect();
    let mut tasks = Vec::new();
    if model.has(Task::Stress) && examples.iter().all(|e| e.stress_label.is_some()) {
        tasks.push(Task::Stress);
    }
    if model.has(Task::Emotion) && examples.iter().all(|e| e.emotion_vector.is_some()) {
        tasks.push(Task::Emotion);
    }
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, &tasks, &mut ForwardCtx::eval())?;
    let ls = out
        .stress
        .map(|l| {
            let g: Vec<StressLabel> = examples.iter().map(|e| e.stress_label.unwrap()).collect();
            stress_loss_node(&mut tape, l, &g)
        })
        .transpose()?;
    let le = out
        .emotion
        .map(|l| {
            let g: Vec<EmotionVector> = examples.iter().map(|e| e.emotion_vector.unwrap()).collect();
            emotion_loss_node(&mut tape, l, &g)
        })
        .transpose()?;
    let total = match (ls, le, lambda) {
        (Some(a), Some(b), Some(lambda)) => {
            let c = combined_loss_node(&mut tape, a, b, lambda)?;
            tape.scalar(c)
        }
        (Some(a), _, _) => tape.scalar(a),
        (None, Some(b), _) => tape.scalar(b),
        _ => return Err(Error::Training("no task has targets for this batch".into())),
    };
    Ok(StepLosses {
        stress: ls.map(|n| tape.scalar(n)),
        emotion: le.map(|n| tape.scalar(n)),
        total,
    })
}

/// Stress F1/accuracy of `model` on labelled examples.
pub fn evaluate_stress(model: &AssembledModel, name: &str, examples: &[TextExample]) -> Result<MetricReport> {
    require_labels(examples, Task::Stress, name)?;
    let inputs = examples
        .iter()
        .map(|e| model.encoder().tokenize(&e.text))
        .collect::<Result<Vec<_>>>()?;
    let preds = predict_stress(model, &inputs)?;
    let p: Vec<bool> = preds.iter().map(|p| p.label.is_positive()).collect();
    let g: Vec<bool> = examples.iter().map(|e| e.stress_label.unwrap().is_positive()).collect();
    MetricReport::binary(name, &p, &g)
}

/// Macro F1 of the emotion head on gold-labelled examples.
pub fn evaluate_emotion(
    model: &AssembledModel,
    name: &str,
    examples: &[TextExample],
    threshold: f64,
) -> Result<MetricReport> {
    require_labels(examples, Task::Emotion, name)?;
    let inputs = examples
        .iter()
        .map(|e| model.encoder().tokenize(&e.text))
        .collect::<Result<Vec<_>>>()?;
    let preds = predict_emotions(model, &inputs, threshold)?;
    let g: Vec<EmotionVector> = examples.iter().map(|e| e.emotion_vector.unwrap()).collect();
    MetricReport::emotion(name, &preds, &g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub reports: BTreeMap<String, MetricReport>,
    pub fingerprint: String,
    #[serde(default)]
    pub manifest: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeededResult {
    pub runs: Vec<RunResult>,
    pub mean: BTreeMap<String, MetricReport>,
}

/// Runs every seed; a single failure fails the whole cell.
pub fn run_seeded<F>(seeds: &SeedSet, mut train: F) -> Result<SeededResult>
where
    F: FnMut(u64) -> Result<RunResult>,
{
    let mut runs = Vec::with_capacity(seeds.seeds().len());
    for &seed in seeds.seeds() {
        let r = train(seed).map_err(|e| Error::Experiment(format!("seed {seed} failed: {e}")))?;
        runs.push(r);
    }
    let keys: Vec<String> = runs[0].reports.keys().cloned().collect();
    let mut mean = BTreeMap::new();
    for k in keys {
        let reports: Vec<MetricReport> = runs
            .iter()
            .map(|r| {
                r.reports
                    .get(&k)
                    .cloned()
                    .ok_or_else(|| Error::Experiment(format!("seed {} lacks `{k}`", r.seed)))
            })
            .collect::<Result<_>>()?;
        mean.insert(k, MetricReport::mean(&reports)?);
    }
    Ok(SeededResult { runs, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emotaxonomy::CoarseEmotion;
    use crate::encoder::EncoderIdentity;

    #[test]
    fn flat_metric_stops_after_patience() {
        let p = EarlyStopPolicy::default();
        assert_eq!(stop_epoch(p, &[0.5; 6]), Some((6, StopReason::Patience)));
        assert_eq!(stop_epoch(p, &[0.5; 5]), None);
    }

    #[test]
    fn gain_of_exactly_tolerance_does_not_reset_patience() {
        let p = EarlyStopPolicy::default();
        let seq = [0.5, 0.5001, 0.5001, 0.5001, 0.5001, 0.5001];
        assert_eq!(stop_epoch(p, &seq), Some((6, StopReason::Patience)));
        let seq = [0.5, 0.50011, 0.5, 0.5, 0.5, 0.5, 0.5];
        assert_eq!(stop_epoch(p, &seq), Some((7, StopReason::Patience)));
    }

    #[test]
    fn steady_improvement_runs_to_max_epochs() {
        let seq: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert_eq!(
            stop_epoch(EarlyStopPolicy::default(), &seq),
            Some((20, StopReason::MaxEpochs))
        );
    }

    #[test]
    fn seed_set_needs_three() {
        assert!(SeedSet::new(vec![1, 2]).is_err());
        assert_eq!(SeedSet::default().seeds().len(), 3);
    }

    #[test]
    fn run_seeded_means_and_fails_whole_cell() {
        let mk = |seed: u64, f1: f64| RunResult {
            seed,
            reports: [("t".to_string(), MetricReport {
                eval_set: "t".into(),
                n: 1,
                f1,
                accuracy: f1,
                macro_f1: None,
                degenerate: false,
            })]
            .into(),
            fingerprint: String::new(),
            manifest: serde_json::Value::Null,
        };
        let seeds = SeedSet::new(vec![1, 2, 3]).unwrap();
        let r = run_seeded(&seeds, |s| Ok(mk(s, 68.0 + 2.0 * s as f64))).unwrap();
        assert_eq!(r.mean["t"].f1, 72.0);
        let err = run_seeded(&seeds, |s| {
            if s == 2 {
                Err(Error::Training("boom".into()))
            } else {
                Ok(mk(s, 1.0))
            }
        });
        assert!(err.is_err());
    }

    #[test]
    fn schedule_alternates_from_stress() {
        assert_eq!(
            alternation_schedule(2),
            vec![Task::Stress, Task::Emotion, Task::Stress, Task::Emotion]
        );
    }

    #[test]
    fn cycler_reshuffles_on_exhaustion() {
        let mut c = Cycler::new(5, stream(1, 3));
        let a = c.next_batch(5);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        let b = c.next_batch(7);
        assert_eq!(b.len(), 7);
    }

    pub(crate) fn stress_set(n: usize) -> Vec<TextExample> {
        (0..n)
            .map(|i| {
                let pos = i % 2 == 0;
                let text = if pos {
                    format!("deadline panic anxious overwhelmed {i}")
                } else {
                    format!("calm sunny relaxed garden {i}")
                };
                let mut e = TextExample::stress(format!("s{i}"), text, StressLabel::from_bool(pos));
                e.emotion_vector = Some(EmotionVector::from_labels([if pos {
                    CoarseEmotion::Fear
                } else {
                    CoarseEmotion::Joy
                }]));
                e
            })
            .collect()
    }

    fn tiny_config(arch: Architecture) -> ModelConfig {
        let mut c = ModelConfig::new(arch, EncoderIdentity::tiny());
        c.learning_rate = 1e-3;
        c
    }

    fn quick_opts() -> TrainOptions {
        TrainOptions {
            batch_size: 8,
            policy: EarlyStopPolicy {
                max_epochs: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let dev = stress_set(4);
        let data = TrainDev::new("train", &[], "dev", &dev);
        let r = train_single_task(&tiny_config(Architecture::SingleTask), Task::Stress, &data, &quick_opts(), 1);
        assert!(r.is_err());
    }

    #[test]
    fn same_seed_same_fingerprint() {
        let ex = stress_set(16);
        let data = TrainDev::new("train", &ex, "dev", &ex);
        let cfg = tiny_config(Architecture::SingleTask);
        let a = train_single_task(&cfg, Task::Stress, &data, &quick_opts(), 5).unwrap();
        let b = train_single_task(&cfg, Task::Stress, &data, &quick_opts(), 5).unwrap();
        assert_eq!(a.model.fingerprint(), b.model.fingerprint());
        let c = train_single_task(&cfg, Task::Stress, &data, &quick_opts(), 6).unwrap();
        assert_ne!(a.model.fingerprint(), c.model.fingerprint());
        let best = a.history.iter().map(|h| h.dev_metric).fold(f64::MIN, f64::max);
        assert_eq!(a.best_metric, best);
        let again = evaluate_stress(&a.model, "dev", &ex).unwrap();
        assert_eq!(again.f1, best);
    }

    #[test]
    fn joint_requires_pseudo_labels() {
        let mut ex = stress_set(8);
        ex[3].emotion_vector = None;
        let data = TrainDev::new("train", &ex, "dev", &ex);
        let err = train_joint(&tiny_config(Architecture::Multi), &data, &quick_opts(), 0);
        assert!(matches!(err, Err(Error::Training(_))));
    }

    #[test]
    fn joint_loss_follows_lambda() {
        let ex = stress_set(6);
        let m = crate::models::tiny_model(Architecture::Multi, 2);
        let a = batch_losses(&m, &ex, Some(0.9)).unwrap();
        let b = batch_losses(&m, &ex, Some(0.45)).unwrap();
        let (s, e) = (a.stress.unwrap(), a.emotion.unwrap());
        assert_eq!((s, e), (b.stress.unwrap(), b.emotion.unwrap()));
        assert!((a.total - (0.9 * s + 0.1 * e)).abs() < 1e-12);
        assert!((b.total - (0.45 * s + 0.55 * e)).abs() < 1e-12);
    }

    #[test]
    fn pseudo_labelling_needs_a_frozen_model() {
        let ex = stress_set(5);
        let cfg = tiny_config(Architecture::SingleTask);
        let m = AssembledModel::emotion_only(cfg, Encoder::tiny(0), 1).unwrap();
        assert!(pseudo_label_emotions(&m, &ex, 0.5).is_err());
        let m = m.freeze();
        let a = pseudo_label_emotions(&m, &ex, 0.5).unwrap();
        let b = pseudo_label_emotions(&m, &ex, 0.5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|e| e.emotion_is_pseudo && !e.emotion_vector.unwrap().is_empty()));
        assert_eq!(a[0].stress_label, ex[0].stress_label);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let ex = stress_set(24);
        let emo = stress_set(10)
            .into_iter()
            .map(|mut e| {
                e.source = Source::Emotion;
                e.stress_label = None;
                e
            })
            .collect::<Vec<_>>();
        let data = TrainDev::new("train", &ex, "dev", &ex);
        let cfg = tiny_config(Architecture::MultiAlt);
        let opts = quick_opts();
        let fresh = || AssembledModel::assemble(cfg.clone(), Encoder::tiny(0), 3).unwrap();
        let full = Session::start(Regime::Alternating, fresh(), &data, Some(("emo", &emo)), &opts, 3)
            .unwrap()
            .run()
            .unwrap();

        let mut s = Session::start(Regime::Alternating, fresh(), &data, Some(("emo", &emo)), &opts, 3).unwrap();
        s.run_epoch().unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.state().save(dir.path()).unwrap();
        drop(s);
        let state = TrainState::load(dir.path(), Path::new(".")).unwrap();
        let resumed = Session::resume(state, &data, Some(("emo", &emo)), &opts)
            .unwrap()
            .run()
            .unwrap();
        assert_eq!(resumed.model.fingerprint(), full.model.fingerprint());
        assert_eq!(resumed.history, full.history);
    }
}
