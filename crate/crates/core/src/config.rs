//! The TOML run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    self, published, ColumnSchema, DatasetSplit, Partition, ReductionPlan, Source, SplitCounts,
    REDUCTION_FRACTIONS,
};
use crate::emotaxonomy::EmotionTaxonomy;
use crate::encoder::{EncoderIdentity, EncoderName};
use crate::error::{Error, Result};
use crate::trainer::{EarlyStopPolicy, SeedSet, TrainOptions};
use crate::tuner::{Strategy, DEFAULT_BUDGET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root against which every relative path resolves.
    #[serde(default = "dot")]
    pub workspace: PathBuf,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub tuning_seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_threshold")]
    pub emotion_threshold: f64,
    /// Keep a model checkpoint for every seed run of a study.
    #[serde(default)]
    pub save_checkpoints: bool,
    #[serde(default)]
    pub early_stopping: EarlyStopPolicy,
    pub data: DataConfig,
    #[serde(rename = "encoder")]
    pub encoders: Vec<EncoderIdentity>,
    #[serde(default)]
    pub labeler: LabelerConfig,
    #[serde(default)]
    pub reduction: ReductionConfig,
    /// Encoder whose emotion labeler drives the distribution study.
    #[serde(default)]
    pub distribution_encoder: Option<EncoderName>,
}

fn dot() -> PathBuf {
    PathBuf::from(".")
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn default_seeds() -> Vec<u64> {
    SeedSet::DEFAULT.to_vec()
}
fn default_batch() -> usize {
    16
}
fn default_budget() -> usize {
    DEFAULT_BUDGET
}
fn default_strategy() -> Strategy {
    Strategy::Bayesian
}
fn one() -> usize {
    1
}
fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub stress: CorpusConfig,
    pub minority: CorpusConfig,
    pub emotion: CorpusConfig,
    /// Alternative fine-to-coarse mapping file.
    #[serde(default)]
    pub mapping: Option<PathBuf>,
}

/// Either one file split by counts, or three pre-split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(flatten)]
    pub schema: ColumnSchema,
    /// `[train, dev, test]`; defaults to the published sizes.
    #[serde(default)]
    pub split: Option<[usize; 3]>,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelerConfig {
    pub learning_rate: f64,
    pub dropout: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionCounts {
    /// The published per-fraction sizes (requires the published training size).
    Published,
    /// `floor(fraction * n)`.
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionConfig {
    pub fractions: Vec<f64>,
    pub counts: ReductionCounts,
    pub seed: u64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            fractions: REDUCTION_FRACTIONS.to_vec(),
            counts: ReductionCounts::Published,
            seed: 0,
        }
    }
}

impl ReductionConfig {
    pub fn plan(&self, fraction: f64, full_train: usize) -> Result<ReductionPlan> {
        match self.counts {
            ReductionCounts::Published => {
                if full_train != published::STRESS.train {
                    return Err(Error::Config(format!(
                        "published reduction sizes assume {} training examples, found {full_train}",
                        published::STRESS.train
                    )));
                }
                ReductionPlan::published(fraction, self.seed)
            }
            ReductionCounts::Proportional => ReductionPlan::proportional(fraction, full_train, self.seed),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates; a relative `workspace` resolves against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.workspace.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.workspace = base.join(&cfg.workspace);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        SeedSet::new(self.seeds.clone())?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.emotion_threshold) {
            return Err(Error::Config("emotion_threshold outside [0, 1]".into()));
        }
        let p = self.early_stopping;
        if p.max_epochs == 0 || p.patience == 0 || !(p.tolerance >= 0.0) {
            return Err(Error::Config("invalid early_stopping policy".into()));
        }
        if self.encoders.is_empty() {
            return Err(Error::Config("at least one [[encoder]] is required".into()));
        }
        for (i, e) in self.encoders.iter().enumerate() {
            if self.encoders[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::Config(format!("encoder `{}` listed twice", e.name)));
            }
            if e.name.needs_assets() && e.asset_ref.is_none() {
                return Err(Error::Config(format!("encoder `{}` needs asset_ref", e.name)));
            }
            if e.max_len < 2 {
                return Err(Error::Config(format!("encoder `{}` max_len too small", e.name)));
            }
        }
        if let Some(d) = self.distribution_encoder {
            if !self.encoders.iter().any(|e| e.name == d) {
                return Err(Error::Config(format!("distribution_encoder `{d}` is not configured")));
            }
        }
        for f in &self.reduction.fractions {
            ReductionPlan::proportional(*f, 100, 0)?;
        }
        for (name, c) in self.corpora() {
            let single = c.path.is_some();
            let triple = c.train.is_some() || c.dev.is_some() || c.test.is_some();
            if single == triple {
                return Err(Error::Config(format!(
                    "data.{name}: give either `path` or `train`/`dev`/`test`"
                )));
            }
            if triple && (c.dev.is_none() || c.test.is_none()) {
                return Err(Error::Config(format!("data.{name}: dev and test files are required")));
            }
        }
        Ok(())
    }

    fn corpora(&self) -> [(&'static str, &CorpusConfig); 3] {
        [
            ("stress", &self.data.stress),
            ("minority", &self.data.minority),
            ("emotion", &self.data.emotion),
        ]
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workspace.join(p)
        }
    }

    pub fn output_root(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn seed_set(&self) -> SeedSet {
        SeedSet::new(self.seeds.clone()).expect("validated")
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            policy: self.early_stopping,
            max_steps: self.max_steps,
            emotion_loss_scale: 1.0,
            emotion_threshold: self.emotion_threshold,
            asset_root: self.workspace.clone(),
        }
    }

    pub fn encoder(&self, name: EncoderName) -> Result<&EncoderIdentity> {
        self.encoders
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("encoder `{name}` is not configured")))
    }

    pub fn taxonomy(&self) -> Result<EmotionTaxonomy> {
        match &self.data.mapping {
            Some(p) => EmotionTaxonomy::load(&self.resolve(p)),
            None => Ok(EmotionTaxonomy::ekman()),
        }
    }

    pub fn corpus_config(&self, source: Source) -> &CorpusConfig {
        match source {
            Source::Stress => &self.data.stress,
            Source::Minority => &self.data.minority,
            Source::Emotion => &self.data.emotion,
        }
    }

    pub fn split_counts(&self, source: Source) -> SplitCounts {
        match self.corpus_config(source).split {
            Some([a, b, c]) => SplitCounts::new(a, b, c),
            None => match source {
                Source::Stress => published::STRESS,
                Source::Minority => published::MINORITY,
                Source::Emotion => published::EMOTION,
            },
        }
    }

    /// Every input file the configuration names, resolved.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut v = Vec::new();
        for (_, c) in self.corpora() {
            for p in [&c.path, &c.train, &c.dev, &c.test].into_iter().flatten() {
                v.push(self.resolve(p));
            }
        }
        if let Some(m) = &self.data.mapping {
            v.push(self.resolve(m));
        }
        v
    }
}

/// Loads, validates and splits one corpus. Any rejected row is an error.
pub fn load_split(cfg: &RunConfig, source: Source, tax: &EmotionTaxonomy) -> Result<DatasetSplit> {
    let c = cfg.corpus_config(source);
    let load = |p: &Path| -> Result<Vec<corpus::TextExample>> {
        corpus::load_corpus(&cfg.resolve(p), source, &c.schema, tax)?.into_strict()
    };
    let counts = cfg.split_counts(source);
    if let Some(p) = &c.path {
        let all = load(p)?;
        return corpus::split_dataset(source.name(), &all, counts, c.split_seed);
    }
    let part = |p: &Option<PathBuf>| -> Result<Vec<corpus::TextExample>> {
        match p {
            Some(p) => load(p),
            None => Ok(Vec::new()),
        }
    };
    let split = DatasetSplit {
        name: source.name().to_string(),
        train: part(&c.train)?,
        dev: part(&c.dev)?,
        test: part(&c.test)?,
        seed: c.split_seed,
    };
    if c.split.is_some() && split.counts() != counts {
        return Err(Error::Split(format!(
            "{source}: files hold {:?}, config expects {counts:?}",
            split.counts()
        )));
    }
    for p in Partition::ALL {
        log::debug!("{source}/{}: {}", p.name(), split.partition(p).len());
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seeds = [1, 2, 3]

[data.stress]
path = "s.csv"
text_col = "text"
label_cols = ["label"]

[data.minority]
path = "m.csv"
text_col = "text"
label_cols = ["label"]
split = [0, 5, 5]

[data.emotion]
train = "e_train.tsv"
dev = "e_dev.tsv"
test = "e_test.tsv"
text_col = "text"
label_cols = ["labels"]

[[encoder]]
name = "tiny_test"
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.budget, 20);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.early_stopping, EarlyStopPolicy::default());
        assert_eq!(c.split_counts(Source::Stress), published::STRESS);
        assert_eq!(c.split_counts(Source::Minority), SplitCounts::new(0, 5, 5));
        assert_eq!(c.encoders[0].max_len, 512);
        assert_eq!(c.input_files().len(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("seeds = [1, 2, 3]", "seeds = [1, 2, 3]\nlearning_rate = 1e-5");
        assert!(RunConfig::from_toml(&bad).is_err());
        let bad = MINIMAL.replace("[[encoder]]\nname = \"tiny_test\"", "[[encoder]]\nname = \"tiny_test\"\ncolour = 1");
        assert!(RunConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn semantic_validation() {
        let bad = MINIMAL.replace("seeds = [1, 2, 3]", "seeds = [1, 2]");
        assert!(RunConfig::from_toml(&bad).is_err());
        let bad = MINIMAL.replace("name = \"tiny_test\"", "name = \"base_general\"");
        assert!(RunConfig::from_toml(&bad).is_err());
        let bad = MINIMAL.replace("path = \"m.csv\"", "path = \"m.csv\"\ntrain = \"x.csv\"");
        assert!(RunConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn published_reduction_needs_published_size() {
        let r = ReductionConfig::default();
        assert_eq!(r.plan(0.5, 2122).unwrap().target_count, 1060);
        assert!(r.plan(0.5, 100).is_err());
        let p = ReductionConfig {
            counts: ReductionCounts::Proportional,
            ..Default::default()
        };
        assert_eq!(p.plan(0.5, 100).unwrap().target_count, 50);
    }
}
