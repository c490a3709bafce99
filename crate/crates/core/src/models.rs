//! Classification heads, the four model assemblies, losses and prediction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, ForwardCtx, NodeId, ParamGroup, Tape};
use crate::corpus::StressLabel;
use crate::emotaxonomy::{EmotionVector, NUM_EMOTIONS};
use crate::encoder::{Encoder, EncoderCheckpoint, EncoderConfig, EncoderIdentity, EncoderName};
use crate::error::{Error, Result};
use crate::params::{init_dense, ParamStore};
use crate::safetensors::{self, Metadata};
use crate::tokenize::TokenizedInput;

pub const LEARNING_RATE_RANGE: (f64, f64) = (1e-6, 1e-3);
pub const DROPOUT_RANGE: (f64, f64) = (0.0, 1.0);
pub const LAMBDA_RANGE: (f64, f64) = (0.0, 0.9);
pub const STRESS_CLASSES: usize = 2;
pub const DEFAULT_EMOTION_THRESHOLD: f64 = 0.5;
const HEAD_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SingleTask,
    FineTune,
    MultiAlt,
    Multi,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::SingleTask,
        Architecture::FineTune,
        Architecture::MultiAlt,
        Architecture::Multi,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Architecture::SingleTask => "single",
            Architecture::FineTune => "finetune",
            Architecture::MultiAlt => "multialt",
            Architecture::Multi => "multi",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::SingleTask => "Single-Task",
            Architecture::FineTune => "Fine-Tune",
            Architecture::MultiAlt => "Multi-Alt",
            Architecture::Multi => "Multi",
        }
    }

    pub fn has_emotion_head(self) -> bool {
        matches!(self, Architecture::MultiAlt | Architecture::Multi)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match norm.as_str() {
            "single" | "singletask" => Architecture::SingleTask,
            "finetune" => Architecture::FineTune,
            "multialt" => Architecture::MultiAlt,
            "multi" => Architecture::Multi,
            _ => return Err(Error::Config(format!("unknown architecture `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Stress,
    Emotion,
}

impl Task {
    pub fn width(self) -> usize {
        match self {
            Task::Stress => STRESS_CLASSES,
            Task::Emotion => NUM_EMOTIONS,
        }
    }

    pub fn group(self) -> ParamGroup {
        match self {
            Task::Stress => ParamGroup::StressHead,
            Task::Emotion => ParamGroup::EmotionHead,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub encoder: EncoderIdentity,
    pub dropout: f64,
    pub learning_rate: f64,
    #[serde(default)]
    pub lambda: Option<f64>,
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    v.is_finite() && v >= lo && v <= hi
}

impl ModelConfig {
    pub fn new(architecture: Architecture, encoder: EncoderIdentity) -> Self {
        Self {
            architecture,
            encoder,
            dropout: 0.1,
            learning_rate: 2e-5,
            lambda: (architecture == Architecture::Multi).then_some(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !in_range(self.learning_rate, LEARNING_RATE_RANGE) {
            return Err(Error::Config(format!(
                "learning rate {} outside [1e-6, 1e-3]",
                self.learning_rate
            )));
        }
        if !in_range(self.dropout, DROPOUT_RANGE) {
            return Err(Error::Config(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        match (self.architecture, self.lambda) {
            (Architecture::Multi, Some(l)) if in_range(l, LAMBDA_RANGE) => Ok(()),
            (Architecture::Multi, Some(l)) => {
                Err(Error::Config(format!("lambda {l} outside [0, 0.9]")))
            }
            (Architecture::Multi, None) => Err(Error::Config("multi requires lambda".into())),
            (_, Some(_)) => Err(Error::Config(format!(
                "lambda is only meaningful for multi, not {}",
                self.architecture
            ))),
            (_, None) => Ok(()),
        }
    }

    pub fn lambda(&self) -> Result<f64> {
        self.lambda
            .ok_or_else(|| Error::Config("configuration has no lambda".into()))
    }
}

/// Dropout followed by a dense layer over the pooled representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    task: Task,
    pub dropout: f64,
    params: ParamStore,
    init_fingerprint: String,
}

impl Head {
    pub fn new(task: Task, hidden: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        params.insert("weight", init_dense(rng, task.width(), hidden, HEAD_INIT_STD));
        params.insert("bias", ndarray::ArrayD::zeros(vec![task.width()]));
        let init_fingerprint = params.fingerprint();
        Self {
            task,
            dropout,
            params,
            init_fingerprint,
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn width(&self) -> usize {
        self.task.width()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn init_fingerprint(&self) -> &str {
        &self.init_fingerprint
    }

    pub fn is_untrained(&self) -> bool {
        self.fingerprint() == self.init_fingerprint
    }

    pub fn forward(&self, tape: &mut Tape, pooled: NodeId, ctx: &mut ForwardCtx<'_>) -> Result<NodeId> {
        let g = self.task.group();
        let x = tape.dropout(pooled, self.dropout, ctx);
        let w = self.params.leaf(tape, g, 0);
        let b = self.params.leaf(tape, g, 1);
        tape.linear(x, w, Some(b))
    }

    fn from_store(task: Task, dropout: f64, params: ParamStore, init_fingerprint: String) -> Result<Self> {
        let w = params
            .get("weight")
            .ok_or_else(|| Error::Checkpoint(format!("{task:?} head lacks weight")))?;
        if w.ndim() != 2 || w.shape()[0] != task.width() || params.get("bias").is_none() {
            return Err(Error::Checkpoint(format!(
                "{task:?} head weight has shape {:?}",
                w.shape()
            )));
        }
        // leaf indices 0/1 must be weight/bias
        let params = ParamStore::from_tensors([
            ("weight".to_string(), w.clone()),
            ("bias".to_string(), params.get("bias").unwrap().clone()),
        ]);
        Ok(Self {
            task,
            dropout,
            params,
            init_fingerprint,
        })
    }
}

/// Logit nodes produced by one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeadOutputs {
    pub stress: Option<NodeId>,
    pub emotion: Option<NodeId>,
}

/// One encoder shared by every head the architecture carries.
#[derive(Debug, Clone)]
pub struct AssembledModel {
    config: ModelConfig,
    encoder: Encoder,
    stress_head: Option<Head>,
    emotion_head: Option<Head>,
    frozen: bool,
}

fn head_rng(seed: u64, task: Task) -> ChaCha8Rng {
    let salt = match task {
        Task::Stress => 0x5354_5245_5353,
        Task::Emotion => 0x454d_4f54_494f,
    };
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

impl AssembledModel {
    /// Heads follow the architecture: stress only for Single-Task and
    /// Fine-Tune, stress plus emotion for the two multi-task variants.
    pub fn assemble(config: ModelConfig, encoder: Encoder, seed: u64) -> Result<Self> {
        let tasks: &[Task] = if config.architecture.has_emotion_head() {
            &[Task::Stress, Task::Emotion]
        } else {
            &[Task::Stress]
        };
        Self::with_tasks(config, encoder, tasks, seed)
    }

    /// A single-task emotion model (Fine-Tune stage one, pseudo-labelers).
    pub fn emotion_only(config: ModelConfig, encoder: Encoder, seed: u64) -> Result<Self> {
        if config.architecture != Architecture::SingleTask
            && config.architecture != Architecture::FineTune
        {
            return Err(Error::Config(format!(
                "an emotion-only model cannot be {}",
                config.architecture
            )));
        }
        Self::with_tasks(config, encoder, &[Task::Emotion], seed)
    }

    fn with_tasks(config: ModelConfig, encoder: Encoder, tasks: &[Task], seed: u64) -> Result<Self> {
        config.validate()?;
        if encoder.name() != config.encoder.name {
            return Err(Error::Config(format!(
                "config names encoder `{}` but `{}` was supplied",
                config.encoder.name,
                encoder.name()
            )));
        }
        let hidden = encoder.hidden_size();
        let mk = |t: Task| Head::new(t, hidden, config.dropout, &mut head_rng(seed, t));
        Ok(Self {
            stress_head: tasks.contains(&Task::Stress).then(|| mk(Task::Stress)),
            emotion_head: tasks.contains(&Task::Emotion).then(|| mk(Task::Emotion)),
            config,
            encoder,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Encoder {
        &mut self.encoder
    }

    pub fn stress_head(&self) -> Option<&Head> {
        self.stress_head.as_ref()
    }

    pub fn emotion_head(&self) -> Option<&Head> {
        self.emotion_head.as_ref()
    }

    pub fn has(&self, task: Task) -> bool {
        self.head(task).is_some()
    }

    pub fn head(&self, task: Task) -> Option<&Head> {
        match task {
            Task::Stress => self.stress_head.as_ref(),
            Task::Emotion => self.emotion_head.as_ref(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the model read-only; training entry points refuse frozen models.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn unfreeze(mut self) -> Self {
        self.frozen = false;
        self
    }

    /// Mutable stores keyed by gradient group, for the optimizer.
    pub fn stores_mut(&mut self) -> Result<Vec<(ParamGroup, &mut ParamStore)>> {
        if self.frozen {
            return Err(Error::Training("model is frozen".into()));
        }
        let mut v = vec![(ParamGroup::Encoder, self.encoder.params_mut())];
        if let Some(h) = &mut self.stress_head {
            v.push((ParamGroup::StressHead, &mut h.params));
        }
        if let Some(h) = &mut self.emotion_head {
            v.push((ParamGroup::EmotionHead, &mut h.params));
        }
        Ok(v)
    }

    /// Content hash over the encoder and every head.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.encoder.fingerprint());
        for head in [&self.stress_head, &self.emotion_head] {
            h.update(b"|");
            if let Some(head) = head {
                h.update(head.fingerprint());
            }
        }
        hex::encode(h.finalize())
    }

    /// Runs the shared encoder once and the requested heads on its output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &[&TokenizedInput],
        tasks: &[Task],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<HeadOutputs> {
        let pooled = self.encoder.forward(tape, batch, ctx)?;
        let mut out = HeadOutputs::default();
        for &t in tasks {
            let head = self
                .head(t)
                .ok_or_else(|| Error::Config(format!("model has no {t:?} head")))?;
            let logits = head.forward(tape, pooled, ctx)?;
            match t {
                Task::Stress => out.stress = Some(logits),
                Task::Emotion => out.emotion = Some(logits),
            }
        }
        Ok(out)
    }

    /// Eval-mode logits for one task.
    pub fn logits(&self, task: Task, batch: &[&TokenizedInput]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, &[task], &mut ForwardCtx::eval())?;
        let id = match task {
            Task::Stress => out.stress,
            Task::Emotion => out.emotion,
        }
        .expect("requested head");
        Ok(tape.value2(id).to_owned())
    }

    /// Replaces the encoder weights, used for the Fine-Tune transfer.
    pub fn import_encoder(&mut self, ckpt: &EncoderCheckpoint) -> Result<()> {
        self.encoder.import_weights(ckpt)?;
        if self.encoder.fingerprint() != ckpt.fingerprint {
            return Err(Error::Checkpoint("transferred encoder fingerprint mismatch".into()));
        }
        Ok(())
    }
}

fn stress_targets(gold: &[StressLabel]) -> Vec<usize> {
    gold.iter().map(|g| g.index()).collect()
}

fn emotion_targets(gold: &[EmotionVector]) -> Array2<f64> {
    let mut t = Array2::zeros((gold.len(), NUM_EMOTIONS));
    for (r, g) in gold.iter().enumerate() {
        for (c, v) in g.as_targets().iter().enumerate() {
            t[[r, c]] = *v;
        }
    }
    t
}

/// Softmax NLL over 2-wide logits, batch mean.
pub fn stress_loss_node(tape: &mut Tape, logits: NodeId, gold: &[StressLabel]) -> Result<NodeId> {
    tape.softmax_nll(logits, &stress_targets(gold))
}

/// Mean sigmoid BCE over the 7 emotion logits of every row.
pub fn emotion_loss_node(tape: &mut Tape, logits: NodeId, gold: &[EmotionVector]) -> Result<NodeId> {
    if tape.value2(logits).ncols() != NUM_EMOTIONS {
        return Err(Error::Shape(format!(
            "emotion logits must be {NUM_EMOTIONS} wide"
        )));
    }
    tape.sigmoid_bce(logits, emotion_targets(gold))
}

/// `lambda * stress + (1 - lambda) * emotion` on the tape.
pub fn combined_loss_node(tape: &mut Tape, stress: NodeId, emotion: NodeId, lambda: f64) -> Result<NodeId> {
    check_lambda(lambda)?;
    let a = tape.scale(stress, lambda);
    let b = tape.scale(emotion, 1.0 - lambda);
    tape.add(a, b)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if in_range(lambda, LAMBDA_RANGE) {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda {lambda} outside [0, 0.9]")))
    }
}

pub fn stress_loss(logits: ArrayView2<'_, f64>, gold: &[StressLabel]) -> Result<f64> {
    if logits.ncols() != STRESS_CLASSES {
        return Err(Error::Shape("stress logits must be 2 wide".into()));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.to_owned().into_dyn());
    let n = stress_loss_node(&mut tape, l, gold)?;
    Ok(tape.scalar(n))
}

pub fn emotion_loss(logits: ArrayView2<'_, f64>, gold: &[EmotionVector]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.to_owned().into_dyn());
    let n = emotion_loss_node(&mut tape, l, gold)?;
    Ok(tape.scalar(n))
}

pub fn combined_loss(stress: f64, emotion: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * stress + (1.0 - lambda) * emotion)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StressPrediction {
    pub label: StressLabel,
    pub prob_stressed: f64,
}

/// Argmax with ties going to the negative class.
pub fn stress_from_logits(not_stressed: f64, stressed: f64) -> StressPrediction {
    StressPrediction {
        label: StressLabel::from_bool(stressed > not_stressed),
        prob_stressed: sigmoid(stressed - not_stressed),
    }
}

/// Indicator `i` is set iff `p_i >= threshold`; if none pass, the argmax
/// label is set so the vector is never empty.
pub fn threshold_emotions(probs: &[f64], threshold: f64) -> EmotionVector {
    let mut bits = [false; NUM_EMOTIONS];
    for (b, &p) in bits.iter_mut().zip(probs) {
        *b = p >= threshold;
    }
    if !bits.iter().any(|&b| b) {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate().take(NUM_EMOTIONS) {
            if p > probs[best] {
                best = i;
            }
        }
        bits[best] = true;
    }
    EmotionVector(bits)
}

pub const PREDICT_BATCH: usize = 32;

fn warn_untrained(model: &AssembledModel, task: Task) {
    if model.head(task).is_some_and(Head::is_untrained) {
        log::warn!("{task:?} head still holds its initial weights");
    }
}

/// Eval-mode logits for all inputs, computed in shards across threads.
fn sharded_logits(model: &AssembledModel, task: Task, inputs: &[TokenizedInput]) -> Result<Array2<f64>> {
    let width = task.width();
    if inputs.is_empty() {
        return Ok(Array2::zeros((0, width)));
    }
    let chunks: Vec<&[TokenizedInput]> = inputs.chunks(PREDICT_BATCH).collect();
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(chunks.len())
        .max(1);
    let per_worker = chunks.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Array2<f64>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per_worker)
            .map(|group| {
                s.spawn(move || {
                    group
                        .iter()
                        .map(|c| model.logits(task, &c.iter().collect::<Vec<_>>()))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    let mut blocks = Vec::with_capacity(chunks.len());
    for p in parts {
        blocks.extend(p?);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

pub fn predict_stress(model: &AssembledModel, inputs: &[TokenizedInput]) -> Result<Vec<StressPrediction>> {
    if !model.has(Task::Stress) {
        return Err(Error::Config("model has no stress head".into()));
    }
    warn_untrained(model, Task::Stress);
    let logits = sharded_logits(model, Task::Stress, inputs)?;
    Ok(logits
        .outer_iter()
        .map(|r| stress_from_logits(r[0], r[1]))
        .collect())
}

pub fn predict_emotions(
    model: &AssembledModel,
    inputs: &[TokenizedInput],
    threshold: f64,
) -> Result<Vec<EmotionVector>> {
    if !model.has(Task::Emotion) {
        return Err(Error::Config("model has no emotion head".into()));
    }
    warn_untrained(model, Task::Emotion);
    let logits = sharded_logits(model, Task::Emotion, inputs)?;
    Ok(logits
        .outer_iter()
        .map(|r| {
            let p: Vec<f64> = r.iter().map(|&z| sigmoid(z)).collect();
            threshold_emotions(&p, threshold)
        })
        .collect())
}

const MODEL_FORMAT: &str = "emostress-model";
const MODEL_VERSION: &str = "1";

impl AssembledModel {
    /// Single safetensors file: encoder and head weights under prefixes, with
    /// configuration, fingerprints and a caller-supplied manifest as metadata.
    pub fn to_checkpoint_bytes(&self, manifest: &serde_json::Value) -> Vec<u8> {
        let mut meta = Metadata::new();
        meta.insert("format".into(), MODEL_FORMAT.into());
        meta.insert("version".into(), MODEL_VERSION.into());
        meta.insert(
            "model_config".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        meta.insert(
            "encoder_config".into(),
            serde_json::to_string(self.encoder.config()).expect("config serializes"),
        );
        meta.insert("encoder_fingerprint".into(), self.encoder.fingerprint());
        meta.insert("model_fingerprint".into(), self.fingerprint());
        meta.insert("frozen".into(), self.frozen.to_string());
        meta.insert("manifest".into(), manifest.to_string());
        let mut named: Vec<(String, &crate::autograd::Tensor)> = self
            .encoder
            .params()
            .iter()
            .map(|(n, t)| (format!("encoder/{n}"), t))
            .collect();
        for (prefix, head) in [("stress_head", &self.stress_head), ("emotion_head", &self.emotion_head)] {
            if let Some(h) = head {
                meta.insert(format!("{prefix}.init"), h.init_fingerprint.clone());
                meta.insert(format!("{prefix}.dropout"), format!("{:?}", h.dropout));
                for (n, t) in h.params.iter() {
                    named.push((format!("{prefix}/{n}"), t));
                }
            }
        }
        safetensors::serialize(named.iter().map(|(n, t)| (n.as_str(), *t)), &meta)
    }

    pub fn save(&self, path: &Path, manifest: &serde_json::Value) -> Result<()> {
        safetensors::write_atomic(path, &self.to_checkpoint_bytes(manifest))
    }

    /// Restores a model; pretrained encoders need their asset directory for
    /// the tokenizer, resolved against `root`.
    pub fn load(path: &Path, root: &Path) -> Result<(Self, serde_json::Value)> {
        let l = safetensors::read(path)?;
        Self::from_checkpoint(l.tensors, &l.metadata, root)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], root: &Path) -> Result<(Self, serde_json::Value)> {
        let l = safetensors::parse(bytes)?;
        Self::from_checkpoint(l.tensors, &l.metadata, root)
    }

    fn from_checkpoint(
        tensors: std::collections::BTreeMap<String, crate::autograd::Tensor>,
        meta: &Metadata,
        root: &Path,
    ) -> Result<(Self, serde_json::Value)> {
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("model checkpoint lacks `{k}`")))
        };
        if field("format")? != MODEL_FORMAT {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        if field("version")? != MODEL_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported model checkpoint version {}",
                field("version")?
            )));
        }
        let config: ModelConfig = serde_json::from_str(field("model_config")?)?;
        let enc_cfg: EncoderConfig = serde_json::from_str(field("encoder_config")?)?;
        let mut parts: [ParamStore; 3] = Default::default();
        for (name, t) in tensors {
            let (prefix, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            let slot = match prefix {
                "encoder" => 0,
                "stress_head" => 1,
                "emotion_head" => 2,
                _ => return Err(Error::Checkpoint(format!("unexpected tensor `{name}`"))),
            };
            parts[slot].insert(rest, t);
        }
        let [enc_params, stress, emotion] = parts;
        let ckpt = EncoderCheckpoint {
            identity: config.encoder.name,
            config: enc_cfg,
            fingerprint: field("encoder_fingerprint")?.clone(),
            params: enc_params,
        };
        let mut encoder = Encoder::load(&config.encoder, root)?;
        encoder.import_weights(&ckpt)?;
        let head = |task: Task, prefix: &str, store: ParamStore| -> Result<Option<Head>> {
            if store.is_empty() {
                return Ok(None);
            }
            let dropout: f64 = field(&format!("{prefix}.dropout"))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("{prefix} dropout unreadable")))?;
            let init = field(&format!("{prefix}.init"))?.clone();
            Head::from_store(task, dropout, store, init).map(Some)
        };
        let model = Self {
            stress_head: head(Task::Stress, "stress_head", stress)?,
            emotion_head: head(Task::Emotion, "emotion_head", emotion)?,
            frozen: field("frozen")? == "true",
            config,
            encoder,
        };
        if &model.fingerprint() != field("model_fingerprint")? {
            return Err(Error::Checkpoint("model fingerprint mismatch".into()));
        }
        let manifest = serde_json::from_str(field("manifest")?)?;
        Ok((model, manifest))
    }
}

/// Convenience for tests and the tiny pipeline.
pub fn tiny_model(architecture: Architecture, seed: u64) -> AssembledModel {
    let mut config = ModelConfig::new(architecture, EncoderIdentity::tiny());
    config.learning_rate = 1e-3;
    AssembledModel::assemble(config, Encoder::tiny(0), seed).expect("tiny config is valid")
}

impl EncoderName {
    /// Whether weights must come from an asset directory.
    pub fn needs_assets(self) -> bool {
        self != EncoderName::TinyTest
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emotaxonomy::CoarseEmotion;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn stress_loss_closed_forms() {
        let l = stress_loss(array![[0.0, 0.0]].view(), &[StressLabel::Stressed]).unwrap();
        assert!((l - LN2).abs() < 1e-12);
        let l = stress_loss(array![[0.0, 0.0]].view(), &[StressLabel::NotStressed]).unwrap();
        assert!((l - LN2).abs() < 1e-12);
        let l = stress_loss(array![[20.0, -20.0]].view(), &[StressLabel::NotStressed]).unwrap();
        assert!(l < 1e-15);
        let l = stress_loss(array![[1.0, -1.0]].view(), &[StressLabel::Stressed]).unwrap();
        assert!((l - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
        assert!((l - 2.1269).abs() < 1e-4);
    }

    #[test]
    fn stress_loss_rejects_non_finite() {
        assert!(stress_loss(array![[f64::NAN, 0.0]].view(), &[StressLabel::Stressed]).is_err());
        assert!(emotion_loss(array![[f64::INFINITY; 7]].view(), &[EmotionVector([true; 7])]).is_err());
    }

    #[test]
    fn emotion_loss_closed_forms() {
        let joy = EmotionVector::from_labels([CoarseEmotion::Joy]);
        let l = emotion_loss(Array2::zeros((1, 7)).view(), &[joy]).unwrap();
        assert!((l - LN2).abs() < 1e-12);
        let logits = Array2::from_shape_fn((1, 7), |(_, c)| if joy.0[c] { 20.0 } else { -20.0 });
        assert!(emotion_loss(logits.view(), &[joy]).unwrap() < 1e-8);
        // one active label at logit 1, the other six at a saturated correct -40
        let mut logits = Array2::from_elem((1, 7), -40.0);
        logits[[0, CoarseEmotion::Joy.index()]] = 1.0;
        let l = emotion_loss(logits.view(), &[joy]).unwrap() * 7.0;
        assert!((l - (-sigmoid(1.0).ln())).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn combined_loss_is_affine() {
        assert_eq!(combined_loss(2.0, 1.0, 0.5).unwrap(), 1.5);
        assert_eq!(combined_loss(123.0, 4.5, 0.0).unwrap(), 4.5);
        assert!((combined_loss(1.0, 2.0, 0.9).unwrap() - 1.1).abs() < 1e-12);
        assert!(combined_loss(1.0, 1.0, 0.95).is_err());
        assert!(combined_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(Architecture::Multi, EncoderIdentity::tiny());
        assert!(c.validate().is_ok());
        c.lambda = None;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(Architecture::SingleTask, EncoderIdentity::tiny());
        c.lambda = Some(0.3);
        assert!(c.validate().is_err());
        c.lambda = None;
        c.learning_rate = 2e-3;
        assert!(c.validate().is_err());
        c.learning_rate = 1e-6;
        c.dropout = 1.0;
        assert!(c.validate().is_ok());
        c.dropout = 1.01;
        assert!(c.validate().is_err());
    }

    #[test]
    fn assemblies_carry_the_right_heads() {
        for arch in Architecture::ALL {
            let m = tiny_model(arch, 1);
            assert!(m.stress_head().is_some());
            assert_eq!(m.emotion_head().is_some(), arch.has_emotion_head());
            assert_eq!(m.stress_head().unwrap().width(), 2);
            if let Some(h) = m.emotion_head() {
                assert_eq!(h.width(), 7);
            }
        }
        let cfg = ModelConfig::new(Architecture::Multi, EncoderIdentity::tiny());
        assert!(AssembledModel::emotion_only(cfg, Encoder::tiny(0), 0).is_err());
    }

    #[test]
    fn prediction_conventions() {
        let p = stress_from_logits(3.0, 1.0);
        assert_eq!(p.label, StressLabel::NotStressed);
        assert!((p.prob_stressed - sigmoid(-2.0)).abs() < 1e-15);
        assert_eq!(stress_from_logits(0.7, 0.7).label, StressLabel::NotStressed);
        assert_eq!(stress_from_logits(0.0, 1e-12).label, StressLabel::Stressed);

        let v = threshold_emotions(&[0.49, 0.49, 0.49, 0.49, 0.49, 0.49, 0.49], 0.5);
        assert_eq!(v.active().count(), 1);
        let v = threshold_emotions(&[0.1, 0.2, 0.3, 0.45, 0.1, 0.1, 0.2], 0.5);
        assert_eq!(v, EmotionVector::from_labels([CoarseEmotion::Joy]));
        let v = threshold_emotions(&[0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.8], 0.5);
        assert_eq!(
            v,
            EmotionVector::from_labels([CoarseEmotion::Anger, CoarseEmotion::Neutral])
        );
    }

    fn inputs(m: &AssembledModel, texts: &[&str]) -> Vec<TokenizedInput> {
        texts.iter().map(|t| m.encoder().tokenize(t).unwrap()).collect()
    }

    #[test]
    fn batched_prediction_matches_singletons() {
        let m = tiny_model(Architecture::Multi, 3);
        let texts: Vec<String> = (0..70).map(|i| format!("sample text {i} {}", "x ".repeat(i % 9))).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let toks = inputs(&m, &refs);
        let all = predict_stress(&m, &toks).unwrap();
        let emo = predict_emotions(&m, &toks, 0.5).unwrap();
        assert_eq!(emo, predict_emotions(&m, &toks, 0.5).unwrap());
        for i in [0, 31, 32, 69] {
            let one = predict_stress(&m, &toks[i..=i]).unwrap();
            assert_eq!(one[0].label, all[i].label);
            assert!((one[0].prob_stressed - all[i].prob_stressed).abs() < 1e-9);
        }
        assert!(emo.iter().all(|v| !v.is_empty()));
    }

    fn joint_loss(m: &AssembledModel, toks: &[TokenizedInput], lambda: f64) -> (f64, crate::autograd::Gradients) {
        let batch: Vec<&TokenizedInput> = toks.iter().collect();
        let mut tape = Tape::new();
        let out = m
            .forward(&mut tape, &batch, &[Task::Stress, Task::Emotion], &mut ForwardCtx::eval())
            .unwrap();
        let gold_s = [StressLabel::Stressed, StressLabel::NotStressed];
        let gold_e = [
            EmotionVector::from_labels([CoarseEmotion::Fear, CoarseEmotion::Sadness]),
            EmotionVector::from_labels([CoarseEmotion::Joy]),
        ];
        let ls = stress_loss_node(&mut tape, out.stress.unwrap(), &gold_s).unwrap();
        let le = emotion_loss_node(&mut tape, out.emotion.unwrap(), &gold_e).unwrap();
        let l = combined_loss_node(&mut tape, ls, le, lambda).unwrap();
        (tape.scalar(l), tape.backward(l).unwrap())
    }

    #[test]
    fn lambda_zero_cuts_the_stress_head_off() {
        let m = tiny_model(Architecture::Multi, 5);
        let toks = inputs(&m, &["i cannot sleep before exams", "what a lovely day"]);
        let (_, g) = joint_loss(&m, &toks, 0.0);
        let stress: Vec<_> = g.group(ParamGroup::StressHead).iter().flatten().collect();
        assert!(!stress.is_empty());
        assert!(stress.iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(g.max_abs(ParamGroup::EmotionHead) > 0.0);

        let (_, g9) = joint_loss(&m, &toks, 0.9);
        let (_, g0) = joint_loss(&m, &toks, 0.0);
        assert!(g9.max_abs(ParamGroup::StressHead) > 0.0);
        for (a, b) in g9
            .group(ParamGroup::EmotionHead)
            .iter()
            .flatten()
            .zip(g0.group(ParamGroup::EmotionHead).iter().flatten())
        {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - 0.1 * y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let mut m = tiny_model(Architecture::Multi, 9);
        let toks = inputs(&m, &["finite differences on a tiny model", "second row"]);
        let (_, grads) = joint_loss(&m, &toks, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-6;
        for _ in 0..20 {
            let group = ParamGroup::ALL[rng.random_range(0..3)];
            let n_params = match group {
                ParamGroup::Encoder => m.encoder().params().len(),
                _ => 2,
            };
            let pi = rng.random_range(0..n_params);
            let g = grads.get(crate::autograd::ParamKey { group, index: pi });
            fn store(m: &mut AssembledModel, group: ParamGroup) -> &mut ParamStore {
                match group {
                    ParamGroup::Encoder => m.encoder.params_mut(),
                    ParamGroup::StressHead => &mut m.stress_head.as_mut().unwrap().params,
                    ParamGroup::EmotionHead => &mut m.emotion_head.as_mut().unwrap().params,
                }
            }
            let len = store(&mut m, group).value(pi).len();
            let ei = rng.random_range(0..len);
            let orig = store(&mut m, group).value(pi).as_slice().unwrap()[ei];
            store(&mut m, group).value_mut(pi).as_slice_mut().unwrap()[ei] = orig + h;
            let (up, _) = joint_loss(&m, &toks, 0.4);
            store(&mut m, group).value_mut(pi).as_slice_mut().unwrap()[ei] = orig - h;
            let (down, _) = joint_loss(&m, &toks, 0.4);
            store(&mut m, group).value_mut(pi).as_slice_mut().unwrap()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.map(|g| g.as_slice().unwrap()[ei]).unwrap_or(0.0);
            // below ~1e-4 the central difference is dominated by round-off
            let denom = numeric.abs().max(analytic.abs()).max(1e-4);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "{group:?}[{pi}][{ei}]: numeric {numeric} analytic {analytic}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny_model(Architecture::MultiAlt, 4).freeze();
        let manifest = serde_json::json!({"seed": 4});
        let bytes = m.to_checkpoint_bytes(&manifest);
        let (back, man) = AssembledModel::from_checkpoint_bytes(&bytes, Path::new(".")).unwrap();
        assert_eq!(back.fingerprint(), m.fingerprint());
        assert_eq!(man, manifest);
        assert!(back.is_frozen());
        assert_eq!(back.config(), m.config());
        let toks = inputs(&m, &["hello"]);
        assert_eq!(
            back.logits(Task::Emotion, &[&toks[0]]).unwrap(),
            m.logits(Task::Emotion, &[&toks[0]]).unwrap()
        );
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] ^= 0x40;
        assert!(AssembledModel::from_checkpoint_bytes(&bad, Path::new(".")).is_err());
    }

    #[test]
    fn frozen_models_refuse_updates() {
        let mut m = tiny_model(Architecture::SingleTask, 0).freeze();
        assert!(m.stores_mut().is_err());
    }

    proptest! {
        #[test]
        fn stress_loss_is_permutation_consistent(a in -30.0f64..30.0, b in -30.0f64..30.0, gold in any::<bool>()) {
            let g = StressLabel::from_bool(gold);
            let flipped = StressLabel::from_bool(!gold);
            let x = stress_loss(array![[a, b]].view(), &[g]).unwrap();
            let y = stress_loss(array![[b, a]].view(), &[flipped]).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!(x >= 0.0);
        }

        #[test]
        fn emotion_loss_decomposes(z in proptest::collection::vec(-10.0f64..10.0, 7), bits in proptest::collection::vec(any::<bool>(), 7)) {
            let mut arr = [false; 7];
            arr.copy_from_slice(&bits);
            let gold = EmotionVector(arr);
            let full = emotion_loss(Array2::from_shape_vec((1, 7), z.clone()).unwrap().view(), &[gold]).unwrap();
            let singles: f64 = (0..7).map(|i| {
                let y = if arr[i] { 1.0 } else { 0.0 };
                z[i].max(0.0) - z[i] * y + (-z[i].abs()).exp().ln_1p()
            }).sum::<f64>() / 7.0;
            prop_assert!((full - singles).abs() < 1e-12);
        }

        #[test]
        fn combined_loss_exact(ls in 0.0f64..10.0, le in 0.0f64..10.0, lambda in 0.0f64..=0.9) {
            let mut tape = Tape::new();
            let a = tape.constant(ndarray::ArrayD::from_elem(vec![1, 1], ls));
            let b = tape.constant(ndarray::ArrayD::from_elem(vec![1, 1], le));
            let c = combined_loss_node(&mut tape, a, b, lambda).unwrap();
            prop_assert_eq!(tape.scalar(c), combined_loss(ls, le, lambda).unwrap());
        }
    }
}
