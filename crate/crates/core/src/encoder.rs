//! Transformer text encoders behind one interface.
//!
//! All identities share a BERT-style post-LN architecture; the RoBERTa family
//! differs only in position-id offsets, a single token type and its tokenizer.
//! Pretrained weights are read from a user-supplied asset directory holding
//! `config.json`, `model.safetensors` and the tokenizer files. Nothing is ever
//! downloaded.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ForwardCtx, NodeId, ParamGroup, Tape};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::safetensors::{self, Metadata};
use crate::tokenize::{ByteLevelBpe, HashingTokenizer, TokenizedInput, Tokenizer, WordPiece};

/// Environment variable naming the directory relative asset refs resolve against.
pub const ASSET_DIR_ENV: &str = "EMOSTRESS_ASSET_DIR";

pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderName {
    BaseGeneral,
    RobustGeneral,
    BaseMental,
    RobustMental,
    TinyTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Bert,
    Roberta,
    Tiny,
}

impl EncoderName {
    /// The four pretrained identities, in report column order.
    pub const PRETRAINED: [EncoderName; 4] = [
        EncoderName::BaseGeneral,
        EncoderName::RobustGeneral,
        EncoderName::BaseMental,
        EncoderName::RobustMental,
    ];

    pub fn family(self) -> Family {
        match self {
            EncoderName::BaseGeneral | EncoderName::BaseMental => Family::Bert,
            EncoderName::RobustGeneral | EncoderName::RobustMental => Family::Roberta,
            EncoderName::TinyTest => Family::Tiny,
        }
    }

    /// Rounded published parameter counts; `None` for the test encoder.
    pub fn expected_params(self) -> Option<usize> {
        match self.family() {
            Family::Bert => Some(110_000_000),
            Family::Roberta => Some(125_000_000),
            Family::Tiny => None,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            EncoderName::BaseGeneral => "base_general",
            EncoderName::RobustGeneral => "robust_general",
            EncoderName::BaseMental => "base_mental",
            EncoderName::RobustMental => "robust_mental",
            EncoderName::TinyTest => "tiny_test",
        }
    }

    /// Column heading used in result grids.
    pub fn display_name(self) -> &'static str {
        match self {
            EncoderName::BaseGeneral => "BERT",
            EncoderName::RobustGeneral => "RoBERTa",
            EncoderName::BaseMental => "MentalBERT",
            EncoderName::RobustMental => "MentalRoBERTa",
            EncoderName::TinyTest => "Tiny",
        }
    }
}

impl fmt::Display for EncoderName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for EncoderName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match norm.as_str() {
            "base_general" | "bert" => EncoderName::BaseGeneral,
            "robust_general" | "roberta" => EncoderName::RobustGeneral,
            "base_mental" | "mentalbert" => EncoderName::BaseMental,
            "robust_mental" | "mentalroberta" => EncoderName::RobustMental,
            "tiny_test" | "tiny" => EncoderName::TinyTest,
            _ => return Err(Error::Encoder(format!("unknown encoder `{s}`"))),
        })
    }
}

/// Which encoder, where its weights live, and the configured length cap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderIdentity {
    pub name: EncoderName,
    /// Directory holding the pretrained assets. Unused for `tiny_test`.
    #[serde(default)]
    pub asset_ref: Option<String>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Init seed for `tiny_test` and for any head-side weights missing from assets.
    #[serde(default)]
    pub init_seed: u64,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

impl EncoderIdentity {
    pub fn tiny() -> Self {
        Self {
            name: EncoderName::TinyTest,
            asset_ref: None,
            max_len: 128,
            init_seed: 0,
        }
    }

    pub fn pretrained(name: EncoderName, asset_ref: impl Into<String>) -> Self {
        Self {
            name,
            asset_ref: Some(asset_ref.into()),
            max_len: DEFAULT_MAX_LEN,
            init_seed: 0,
        }
    }

    /// Resolves `asset_ref` against an absolute path, then `$EMOSTRESS_ASSET_DIR`,
    /// then `root`.
    pub fn asset_dir(&self, root: &Path) -> Result<PathBuf> {
        let r = self.asset_ref.as_deref().ok_or_else(|| {
            Error::Encoder(format!("encoder `{}` has no asset_ref configured", self.name))
        })?;
        let p = PathBuf::from(r);
        if p.is_absolute() {
            return Ok(p);
        }
        if let Ok(cache) = std::env::var(ASSET_DIR_ENV) {
            let c = PathBuf::from(cache).join(&p);
            if c.exists() {
                return Ok(c);
            }
        }
        Ok(root.join(p))
    }

    /// True when this identity can be materialized without touching disk, or
    /// its asset directory exists.
    pub fn is_available(&self, root: &Path) -> bool {
        self.name == EncoderName::TinyTest
            || self
                .asset_dir(root)
                .map(|d| d.join("model.safetensors").exists())
                .unwrap_or(false)
    }

    /// Loads only the tokenizer.
    pub fn tokenizer(&self, root: &Path) -> Result<Tokenizer> {
        match self.name.family() {
            Family::Tiny => Ok(Tokenizer::Hashing(HashingTokenizer::new(
                EncoderConfig::tiny().vocab_size,
            ))),
            Family::Bert => {
                let dir = self.asset_dir(root)?;
                let lower = read_lowercase_flag(&dir).unwrap_or(true);
                Ok(Tokenizer::WordPiece(WordPiece::from_vocab_file(
                    &dir.join("vocab.txt"),
                    lower,
                )?))
            }
            Family::Roberta => {
                let dir = self.asset_dir(root)?;
                Ok(Tokenizer::ByteBpe(ByteLevelBpe::from_files(
                    &dir.join("vocab.json"),
                    &dir.join("merges.txt"),
                )?))
            }
        }
    }
}

fn read_lowercase_flag(dir: &Path) -> Option<bool> {
    let text = std::fs::read_to_string(dir.join("tokenizer_config.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("do_lower_case")?.as_bool()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub layer_norm_eps: f64,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub pad_token_id: u32,
    /// Position ids start at `pad_token_id + 1` (RoBERTa) instead of 0.
    pub offset_positions: bool,
}

impl EncoderConfig {
    /// 2 layers, width 32, 2 heads.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 512,
            hidden_size: 32,
            num_layers: 2,
            num_heads: 2,
            intermediate_size: 64,
            max_positions: 512,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            pad_token_id: HashingTokenizer::SPECIAL.pad,
            offset_positions: false,
        }
    }

    fn from_hf_json(text: &str, family: Family) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let get = |k: &str| -> Result<usize> {
            v.get(k)
                .and_then(|x| x.as_u64())
                .map(|x| x as usize)
                .ok_or_else(|| Error::Encoder(format!("config.json lacks `{k}`")))
        };
        let getf = |k: &str, d: f64| v.get(k).and_then(|x| x.as_f64()).unwrap_or(d);
        Ok(Self {
            vocab_size: get("vocab_size")?,
            hidden_size: get("hidden_size")?,
            num_layers: get("num_hidden_layers")?,
            num_heads: get("num_attention_heads")?,
            intermediate_size: get("intermediate_size")?,
            max_positions: get("max_position_embeddings")?,
            type_vocab_size: get("type_vocab_size").unwrap_or(2),
            layer_norm_eps: getf("layer_norm_eps", 1e-12),
            hidden_dropout: getf("hidden_dropout_prob", 0.1),
            attention_dropout: getf("attention_probs_dropout_prob", 0.1),
            pad_token_id: v
                .get("pad_token_id")
                .and_then(|x| x.as_u64())
                .unwrap_or(0) as u32,
            offset_positions: family == Family::Roberta,
        })
    }

    /// Longest input the position table can address.
    pub fn usable_positions(&self) -> usize {
        if self.offset_positions {
            self.max_positions
                .saturating_sub(self.pad_token_id as usize + 1)
        } else {
            self.max_positions
        }
    }
}

#[derive(Debug, Clone)]
struct LayerSlots {
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    ao_w: usize,
    ao_b: usize,
    ao_ln_g: usize,
    ao_ln_b: usize,
    in_w: usize,
    in_b: usize,
    out_w: usize,
    out_b: usize,
    out_ln_g: usize,
    out_ln_b: usize,
}

#[derive(Debug, Clone)]
struct Slots {
    word: usize,
    pos: usize,
    typ: usize,
    ln_g: usize,
    ln_b: usize,
    layers: Vec<LayerSlots>,
    pool_w: usize,
    pool_b: usize,
}

fn param_names(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden_size;
    let i = cfg.intermediate_size;
    let mut out = vec![
        ("embeddings.word_embeddings.weight".into(), vec![cfg.vocab_size, h]),
        ("embeddings.position_embeddings.weight".into(), vec![cfg.max_positions, h]),
        ("embeddings.token_type_embeddings.weight".into(), vec![cfg.type_vocab_size, h]),
        ("embeddings.LayerNorm.weight".into(), vec![h]),
        ("embeddings.LayerNorm.bias".into(), vec![h]),
    ];
    for l in 0..cfg.num_layers {
        let p = format!("encoder.layer.{l}");
        for (n, shape) in [
            ("attention.self.query.weight", vec![h, h]),
            ("attention.self.query.bias", vec![h]),
            ("attention.self.key.weight", vec![h, h]),
            ("attention.self.key.bias", vec![h]),
            ("attention.self.value.weight", vec![h, h]),
            ("attention.self.value.bias", vec![h]),
            ("attention.output.dense.weight", vec![h, h]),
            ("attention.output.dense.bias", vec![h]),
            ("attention.output.LayerNorm.weight", vec![h]),
            ("attention.output.LayerNorm.bias", vec![h]),
            ("intermediate.dense.weight", vec![i, h]),
            ("intermediate.dense.bias", vec![i]),
            ("output.dense.weight", vec![h, i]),
            ("output.dense.bias", vec![h]),
            ("output.LayerNorm.weight", vec![h]),
            ("output.LayerNorm.bias", vec![h]),
        ] {
            out.push((format!("{p}.{n}"), shape));
        }
    }
    out.push(("pooler.dense.weight".into(), vec![h, h]));
    out.push(("pooler.dense.bias".into(), vec![h]));
    out
}

fn slots(store: &ParamStore, cfg: &EncoderConfig) -> Result<Slots> {
    let idx = |n: &str| {
        store
            .index_of(n)
            .ok_or_else(|| Error::Encoder(format!("missing weight `{n}`")))
    };
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = |n: &str| idx(&format!("encoder.layer.{l}.{n}"));
        layers.push(LayerSlots {
            q_w: p("attention.self.query.weight")?,
            q_b: p("attention.self.query.bias")?,
            k_w: p("attention.self.key.weight")?,
            k_b: p("attention.self.key.bias")?,
            v_w: p("attention.self.value.weight")?,
            v_b: p("attention.self.value.bias")?,
            ao_w: p("attention.output.dense.weight")?,
            ao_b: p("attention.output.dense.bias")?,
            ao_ln_g: p("attention.output.LayerNorm.weight")?,
            ao_ln_b: p("attention.output.LayerNorm.bias")?,
            in_w: p("intermediate.dense.weight")?,
            in_b: p("intermediate.dense.bias")?,
            out_w: p("output.dense.weight")?,
            out_b: p("output.dense.bias")?,
            out_ln_g: p("output.LayerNorm.weight")?,
            out_ln_b: p("output.LayerNorm.bias")?,
        });
    }
    Ok(Slots {
        word: idx("embeddings.word_embeddings.weight")?,
        pos: idx("embeddings.position_embeddings.weight")?,
        typ: idx("embeddings.token_type_embeddings.weight")?,
        ln_g: idx("embeddings.LayerNorm.weight")?,
        ln_b: idx("embeddings.LayerNorm.bias")?,
        layers,
        pool_w: idx("pooler.dense.weight")?,
        pool_b: idx("pooler.dense.bias")?,
    })
}

fn check_shapes(store: &ParamStore, cfg: &EncoderConfig) -> Result<()> {
    for (name, shape) in param_names(cfg) {
        let t = store
            .get(&name)
            .ok_or_else(|| Error::Encoder(format!("missing weight `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Encoder(format!(
                "`{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Fresh weights: N(0, 0.02)-scale uniform for matrices, ones/zeros for norms.
fn random_weights(cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = 0.02 * 3f64.sqrt();
    let mut store = ParamStore::new();
    for (name, shape) in param_names(cfg) {
        let t = if name.contains("LayerNorm.weight") {
            ArrayD::ones(shape)
        } else if shape.len() == 1 {
            ArrayD::zeros(shape)
        } else {
            ArrayD::from_shape_fn(shape, |_| rng.random_range(-a..=a))
        };
        store.insert(name, t);
    }
    store
}

/// Outcome of the load-time parameter-count gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCountCheck {
    pub observed: usize,
    pub expected: Option<usize>,
    pub within_tolerance: bool,
}

/// Observed count must lie within 2% of the rounded expected count.
pub fn check_param_count(name: EncoderName, observed: usize) -> ParamCountCheck {
    let within_tolerance = match name.expected_params() {
        Some(e) => (observed as f64 - e as f64).abs() <= 0.02 * e as f64,
        None => observed <= 1_000_000,
    };
    ParamCountCheck {
        observed,
        expected: name.expected_params(),
        within_tolerance,
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    identity: EncoderIdentity,
    config: EncoderConfig,
    params: ParamStore,
    tokenizer: Tokenizer,
    slots: Slots,
}

impl Encoder {
    /// The desk-scale test encoder, randomly initialized from `identity.init_seed`.
    pub fn tiny(seed: u64) -> Self {
        let identity = EncoderIdentity {
            init_seed: seed,
            ..EncoderIdentity::tiny()
        };
        Self::build_tiny(identity)
    }

    fn build_tiny(identity: EncoderIdentity) -> Self {
        let config = EncoderConfig::tiny();
        let params = random_weights(&config, identity.init_seed);
        let slots = slots(&params, &config).expect("tiny layout is complete");
        Self {
            identity,
            tokenizer: Tokenizer::Hashing(HashingTokenizer::new(config.vocab_size)),
            config,
            params,
            slots,
        }
    }

    /// Materializes an identity: the tiny encoder directly, pretrained ones from
    /// their asset directory (resolved against `root`).
    pub fn load(identity: &EncoderIdentity, root: &Path) -> Result<Self> {
        if identity.name == EncoderName::TinyTest {
            return Ok(Self::build_tiny(identity.clone()));
        }
        let dir = identity.asset_dir(root)?;
        if !dir.is_dir() {
            return Err(Error::Encoder(format!(
                "asset directory {} for `{}` not found",
                dir.display(),
                identity.name
            )));
        }
        let family = identity.name.family();
        let cfg_text = std::fs::read_to_string(dir.join("config.json"))
            .map_err(|e| Error::io(format!("reading {}/config.json", dir.display()), e))?;
        let config = EncoderConfig::from_hf_json(&cfg_text, family)?;
        let tokenizer = identity.tokenizer(root)?;
        let loaded = safetensors::read(&dir.join("model.safetensors"))?;

        let mut store = ParamStore::new();
        let wanted = param_names(&config);
        let fallback = random_weights(&config, identity.init_seed);
        for (name, _) in &wanted {
            let t = find_pretrained(&loaded.tensors, name);
            match t {
                Some(t) => {
                    store.insert(name.clone(), t.clone());
                }
                None if name.starts_with("pooler.") => {
                    log::warn!("{}: `{name}` absent from assets; initializing", identity.name);
                    store.insert(name.clone(), fallback.get(name).unwrap().clone());
                }
                None => {
                    return Err(Error::Encoder(format!(
                        "{}: weight `{name}` not found in {}",
                        identity.name,
                        dir.display()
                    )))
                }
            }
        }
        check_shapes(&store, &config)?;
        let slots = slots(&store, &config)?;
        let enc = Self {
            identity: identity.clone(),
            config,
            params: store,
            tokenizer,
            slots,
        };
        let check = enc.param_count_check();
        if !check.within_tolerance {
            log::warn!(
                "{}: {} parameters, expected about {:?}",
                identity.name,
                check.observed,
                check.expected
            );
        }
        Ok(enc)
    }

    pub fn identity(&self) -> &EncoderIdentity {
        &self.identity
    }

    pub fn name(&self) -> EncoderName {
        self.identity.name
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn max_len(&self) -> usize {
        self.identity.max_len.min(self.config.usable_positions())
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn param_count_check(&self) -> ParamCountCheck {
        check_param_count(self.identity.name, self.params.num_scalars())
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenizedInput> {
        self.tokenizer.tokenize(text, self.max_len())
    }

    /// Records the pooled `[batch, hidden]` representation on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &[&TokenizedInput],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let cfg = &self.config;
        let seq = batch.iter().map(|t| t.len()).max().unwrap_or(0);
        if seq == 0 || seq > self.config.usable_positions() {
            return Err(Error::Shape(format!(
                "sequence length {seq} outside 1..={}",
                self.config.usable_positions()
            )));
        }
        let n = batch.len() * seq;
        let mut word = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for t in batch {
            for p in 0..seq {
                let real = p < t.len() && t.attention_mask[p] == 1;
                let id = if p < t.len() { t.ids[p] } else { cfg.pad_token_id } as usize;
                if id >= cfg.vocab_size {
                    return Err(Error::Shape(format!(
                        "token id {id} outside vocabulary of {}",
                        cfg.vocab_size
                    )));
                }
                word.push(id);
                mask.push(real);
                pos.push(if cfg.offset_positions {
                    if real {
                        cfg.pad_token_id as usize + 1 + p
                    } else {
                        cfg.pad_token_id as usize
                    }
                } else {
                    p
                });
            }
        }
        let s = &self.slots;
        let g = ParamGroup::Encoder;
        let p = &self.params;
        let leaf = |tape: &mut Tape, i: usize| p.leaf(tape, g, i);

        let we = leaf(tape, s.word);
        let pe = leaf(tape, s.pos);
        let te = leaf(tape, s.typ);
        let w = tape.embedding(we, &word)?;
        let ps = tape.embedding(pe, &pos)?;
        let ty = tape.embedding(te, &vec![0; n])?;
        let x = tape.add(w, ps)?;
        let x = tape.add(x, ty)?;
        let (lg, lb) = (leaf(tape, s.ln_g), leaf(tape, s.ln_b));
        let x = tape.layer_norm(x, lg, lb, cfg.layer_norm_eps)?;
        let mut h = tape.dropout(x, cfg.hidden_dropout, ctx);

        for l in &s.layers {
            let lin = |tape: &mut Tape, x: NodeId, w: usize, b: usize| -> Result<NodeId> {
                let (w, b) = (leaf(tape, w), leaf(tape, b));
                tape.linear(x, w, Some(b))
            };
            let q = lin(tape, h, l.q_w, l.q_b)?;
            let k = lin(tape, h, l.k_w, l.k_b)?;
            let v = lin(tape, h, l.v_w, l.v_b)?;
            let a = tape.attention(
                q,
                k,
                v,
                batch.len(),
                seq,
                cfg.num_heads,
                &mask,
                cfg.attention_dropout,
                ctx,
            )?;
            let a = lin(tape, a, l.ao_w, l.ao_b)?;
            let a = tape.dropout(a, cfg.hidden_dropout, ctx);
            let a = tape.add(a, h)?;
            let (g1, b1) = (leaf(tape, l.ao_ln_g), leaf(tape, l.ao_ln_b));
            let a = tape.layer_norm(a, g1, b1, cfg.layer_norm_eps)?;
            let i = lin(tape, a, l.in_w, l.in_b)?;
            let i = tape.gelu(i);
            let o = lin(tape, i, l.out_w, l.out_b)?;
            let o = tape.dropout(o, cfg.hidden_dropout, ctx);
            let o = tape.add(o, a)?;
            let (g2, b2) = (leaf(tape, l.out_ln_g), leaf(tape, l.out_ln_b));
            h = tape.layer_norm(o, g2, b2, cfg.layer_norm_eps)?;
        }

        // first-token pooling through the pooler dense + tanh
        let first: Vec<usize> = (0..batch.len()).map(|b| b * seq).collect();
        let cls = tape.select_rows(h, &first);
        let (pw, pb) = (leaf(tape, s.pool_w), leaf(tape, s.pool_b));
        let pooled = tape.linear(cls, pw, Some(pb))?;
        Ok(tape.tanh(pooled))
    }

    /// Eval-mode pooled vectors, one row per input.
    pub fn encode(&self, batch: &[&TokenizedInput]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, &mut ForwardCtx::eval())?;
        Ok(tape.value2(out).to_owned())
    }

    pub fn export_weights(&self) -> EncoderCheckpoint {
        EncoderCheckpoint {
            identity: self.identity.name,
            config: self.config.clone(),
            fingerprint: self.fingerprint(),
            params: self.params.clone(),
        }
    }

    /// Replaces all weights with the checkpoint's after validating identity,
    /// fingerprint and layout.
    pub fn import_weights(&mut self, ckpt: &EncoderCheckpoint) -> Result<()> {
        if ckpt.identity != self.identity.name {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds `{}` weights, cannot import into `{}`",
                ckpt.identity, self.identity.name
            )));
        }
        let actual = ckpt.params.fingerprint();
        if actual != ckpt.fingerprint {
            return Err(Error::Checkpoint(format!(
                "fingerprint mismatch: recorded {}, content {}",
                ckpt.fingerprint, actual
            )));
        }
        if ckpt.config != self.config {
            return Err(Error::Checkpoint("encoder configuration differs".into()));
        }
        check_shapes(&ckpt.params, &self.config)?;
        let names = param_names(&self.config);
        if ckpt.params.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, encoder expects {}",
                ckpt.params.len(),
                names.len()
            )));
        }
        // keep the canonical order so optimizer state indices stay valid
        let params = ParamStore::from_tensors(
            names
                .into_iter()
                .map(|(n, _)| (n.clone(), ckpt.params.get(&n).expect("shape-checked").clone())),
        );
        self.slots = slots(&params, &self.config)?;
        self.params = params;
        Ok(())
    }
}

fn find_pretrained<'a>(
    tensors: &'a std::collections::BTreeMap<String, ArrayD<f64>>,
    name: &str,
) -> Option<&'a ArrayD<f64>> {
    let alts = [
        name.to_string(),
        name.replace("LayerNorm.weight", "LayerNorm.gamma")
            .replace("LayerNorm.bias", "LayerNorm.beta"),
    ];
    for prefix in ["", "bert.", "roberta."] {
        for a in &alts {
            if let Some(t) = tensors.get(&format!("{prefix}{a}")) {
                return Some(t);
            }
        }
    }
    None
}

/// Encoder weights plus enough metadata to verify a transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint {
    pub identity: EncoderName,
    pub config: EncoderConfig,
    pub fingerprint: String,
    pub params: ParamStore,
}

const CKPT_FORMAT: &str = "emostress-encoder";
const CKPT_VERSION: &str = "1";

impl EncoderCheckpoint {
    pub fn metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.insert("format".into(), CKPT_FORMAT.into());
        m.insert("version".into(), CKPT_VERSION.into());
        m.insert("identity".into(), self.identity.key().into());
        m.insert(
            "config".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        m.insert("fingerprint".into(), self.fingerprint.clone());
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        safetensors::serialize(self.params.iter(), &self.metadata())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        safetensors::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let l = safetensors::read(path)?;
        Self::from_parts(l.tensors, &l.metadata)
    }

    pub(crate) fn from_parts(
        tensors: std::collections::BTreeMap<String, ArrayD<f64>>,
        meta: &Metadata,
    ) -> Result<Self> {
        if meta.get("format").map(String::as_str) != Some(CKPT_FORMAT) {
            return Err(Error::Checkpoint("not an encoder checkpoint".into()));
        }
        if meta.get("version").map(String::as_str) != Some(CKPT_VERSION) {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {:?}",
                meta.get("version")
            )));
        }
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))
        };
        let identity: EncoderName = field("identity")?.parse()?;
        let config: EncoderConfig = serde_json::from_str(field("config")?)?;
        let fingerprint = field("fingerprint")?.clone();
        let params = ParamStore::from_tensors(tensors);
        if params.fingerprint() != fingerprint {
            return Err(Error::Checkpoint(
                "stored weights do not match the recorded fingerprint".into(),
            ));
        }
        Ok(Self {
            identity,
            config,
            fingerprint,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(enc: &Encoder, texts: &[&str]) -> Vec<TokenizedInput> {
        texts.iter().map(|t| enc.tokenize(t).unwrap()).collect()
    }

    #[test]
    fn tiny_encoder_shape_and_size() {
        let enc = Encoder::tiny(7);
        let toks = inputs(&enc, &["hello there", ""]);
        let out = enc.encode(&toks.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(out.dim(), (2, 32));
        let check = enc.param_count_check();
        assert!(check.observed <= 1_000_000 && check.within_tolerance);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let enc = Encoder::tiny(3);
        let t = enc.tokenize("same input twice").unwrap();
        assert_eq!(enc.encode(&[&t]).unwrap(), enc.encode(&[&t]).unwrap());
    }

    #[test]
    fn batching_matches_singletons() {
        let enc = Encoder::tiny(11);
        let toks = inputs(&enc, &["a short one", "a noticeably longer input sentence here"]);
        let both = enc.encode(&[&toks[0], &toks[1]]).unwrap();
        for (i, t) in toks.iter().enumerate() {
            let one = enc.encode(&[t]).unwrap();
            for (a, b) in both.row(i).iter().zip(one.row(0).iter()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn train_mode_dropout_is_stochastic() {
        let enc = Encoder::tiny(5);
        let t = enc.tokenize("dropout should change this").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let run = |rng: &mut ChaCha8Rng| {
            let mut tape = Tape::new();
            let out = enc.forward(&mut tape, &[&t], &mut ForwardCtx::train(rng)).unwrap();
            tape.value2(out).to_owned()
        };
        let a = run(&mut rng);
        let b = run(&mut rng);
        assert_ne!(a, b);
    }

    #[test]
    fn export_import_round_trip() {
        let src = Encoder::tiny(1);
        let mut dst = Encoder::tiny(2);
        let t = src.tokenize("transfer me").unwrap();
        assert_ne!(src.encode(&[&t]).unwrap(), dst.encode(&[&t]).unwrap());
        let ckpt = src.export_weights();
        let bytes = ckpt.to_bytes();
        let back = safetensors::parse(&bytes).unwrap();
        let ckpt2 = EncoderCheckpoint::from_parts(back.tensors, &back.metadata).unwrap();
        dst.import_weights(&ckpt2).unwrap();
        assert_eq!(src.encode(&[&t]).unwrap(), dst.encode(&[&t]).unwrap());
        assert_eq!(src.fingerprint(), dst.fingerprint());
        assert_eq!(Encoder::tiny(1).fingerprint(), src.fingerprint());
    }

    #[test]
    fn import_rejects_identity_and_fingerprint_mismatch() {
        let mut ckpt = Encoder::tiny(1).export_weights();
        ckpt.identity = EncoderName::BaseGeneral;
        let mut dst = Encoder::tiny(1);
        assert!(dst.import_weights(&ckpt).is_err());
        let mut ckpt = Encoder::tiny(1).export_weights();
        ckpt.fingerprint = "0".repeat(64);
        assert!(dst.import_weights(&ckpt).is_err());
    }

    #[test]
    fn param_gate_tolerates_two_percent() {
        assert!(check_param_count(EncoderName::BaseGeneral, 109_482_240).within_tolerance);
        assert!(check_param_count(EncoderName::RobustMental, 124_645_632).within_tolerance);
        assert!(!check_param_count(EncoderName::RobustGeneral, 110_000_000).within_tolerance);
    }

    #[test]
    fn names_parse_from_aliases() {
        assert_eq!("MentalRoBERTa".parse::<EncoderName>().unwrap(), EncoderName::RobustMental);
        assert_eq!("base-general".parse::<EncoderName>().unwrap(), EncoderName::BaseGeneral);
        assert!("gpt".parse::<EncoderName>().is_err());
    }
}
