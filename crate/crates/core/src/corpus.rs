//! Loading, validation, splitting and subsampling of the three corpora, and
//! the canonical line-delimited example format.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::emotaxonomy::{EmotionTaxonomy, EmotionVector};
use crate::error::{Error, Result, RowError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// General-population psychological stress posts.
    Stress,
    /// Posts from sexual- and gender-minority communities.
    Minority,
    /// Comments annotated with fine-grained emotions.
    Emotion,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Stress => "stress",
            Source::Minority => "minority",
            Source::Emotion => "emotion",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stress" | "dreaddit" => Ok(Source::Stress),
            "minority" | "mstress" => Ok(Source::Minority),
            "emotion" | "goemotions" => Ok(Source::Emotion),
            other => Err(Error::Config(format!("unknown source `{other}`"))),
        }
    }
}

/// Binary stress label. Index 1 is the positive (stressed) class everywhere:
/// in logits, serialized files and metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum StressLabel {
    NotStressed = 0,
    Stressed = 1,
}

impl StressLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_positive(self) -> bool {
        self == StressLabel::Stressed
    }

    pub fn from_bool(stressed: bool) -> Self {
        if stressed {
            StressLabel::Stressed
        } else {
            StressLabel::NotStressed
        }
    }
}

impl From<StressLabel> for u8 {
    fn from(l: StressLabel) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for StressLabel {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(StressLabel::NotStressed),
            1 => Ok(StressLabel::Stressed),
            other => Err(format!("stress label must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub id: String,
    pub text: String,
    pub source: Source,
    pub stress_label: Option<StressLabel>,
    #[serde(rename = "emotion", with = "emotion_bits")]
    pub emotion_vector: Option<EmotionVector>,
    pub emotion_is_pseudo: bool,
}

mod emotion_bits {
    use super::EmotionVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<EmotionVector>, s: S) -> Result<S::Ok, S::Error> {
        v.map(|v| v.bits()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<EmotionVector>, D::Error> {
        let bits: Option<Vec<u8>> = Option::deserialize(d)?;
        bits.map(|b| EmotionVector::from_bits(&b).map_err(serde::de::Error::custom))
            .transpose()
    }
}

impl TextExample {
    pub fn stress(id: impl Into<String>, text: impl Into<String>, label: StressLabel) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            source: Source::Stress,
            stress_label: Some(label),
            emotion_vector: None,
            emotion_is_pseudo: false,
        }
    }

    pub fn emotion(id: impl Into<String>, text: impl Into<String>, v: EmotionVector) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            source: Source::Emotion,
            stress_label: None,
            emotion_vector: Some(v),
            emotion_is_pseudo: false,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("text is empty".into());
        }
        match self.source {
            Source::Stress | Source::Minority if self.stress_label.is_none() => {
                return Err(format!("{} example lacks a stress label", self.source));
            }
            Source::Emotion => match &self.emotion_vector {
                None => return Err("emotion example lacks an emotion vector".into()),
                Some(v) if v.is_empty() => return Err("emotion vector has no active label".into()),
                _ => {}
            },
            _ => {}
        }
        if self.emotion_is_pseudo && self.emotion_vector.is_none() {
            return Err("pseudo flag set without an emotion vector".into());
        }
        Ok(())
    }
}

/// Which columns of a delimited file hold what.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    pub text_col: String,
    #[serde(default)]
    pub id_col: Option<String>,
    /// Stress corpora: exactly one 0/1 column. Emotion corpus: either one
    /// column of separated fine labels (names or ids), several 0/1 columns
    /// named after fine labels, or none to auto-detect fine-label columns.
    #[serde(default)]
    pub label_cols: Vec<String>,
    #[serde(default)]
    pub delimiter: Option<char>,
}

impl ColumnSchema {
    pub fn new(text_col: &str, label_col: &str) -> Self {
        Self {
            text_col: text_col.into(),
            id_col: None,
            label_cols: vec![label_col.into()],
            delimiter: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub examples: Vec<TextExample>,
    pub rejected: Vec<RowError>,
    pub total_rows: usize,
}

impl LoadReport {
    /// Fails if any row was rejected.
    pub fn into_strict(self) -> Result<Vec<TextExample>> {
        if self.rejected.is_empty() {
            Ok(self.examples)
        } else {
            Err(Error::Validation {
                accepted: self.examples.len(),
                rejected: self.rejected,
            })
        }
    }
}

fn delimiter_for(path: &Path, schema: &ColumnSchema) -> u8 {
    if let Some(d) = schema.delimiter {
        return d as u8;
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("tab") => b'\t',
        _ => b',',
    }
}

fn parse_binary(raw: &str) -> std::result::Result<bool, String> {
    match raw.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(format!("label `{other}` is not 0 or 1")),
    }
}

enum LabelPlan {
    Binary(usize),
    FineList(usize),
    FineIndicators(Vec<(usize, String)>),
}

/// Reads a delimited file with a header row. Rows that fail validation are
/// reported (with 1-based data-row numbers), never silently dropped.
pub fn load_corpus(
    path: &Path,
    source: Source,
    schema: &ColumnSchema,
    taxonomy: &EmotionTaxonomy,
) -> Result<LoadReport> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path, schema))
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::Empty(format!("{} has no header row", path.display())));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let text_idx = col(&schema.text_col)?;
    let id_idx = schema.id_col.as_deref().map(col).transpose()?;
    let plan = match source {
        Source::Stress | Source::Minority => match schema.label_cols.as_slice() {
            [one] => LabelPlan::Binary(col(one)?),
            _ => {
                return Err(Error::Config(format!(
                    "{source} corpus needs exactly one label column"
                )))
            }
        },
        Source::Emotion => match schema.label_cols.as_slice() {
            [one] => LabelPlan::FineList(col(one)?),
            [] => {
                let found: Vec<_> = headers
                    .iter()
                    .enumerate()
                    .filter(|(_, h)| taxonomy.coarse_of(h).is_ok())
                    .map(|(i, h)| (i, h.trim().to_string()))
                    .collect();
                if found.is_empty() {
                    return Err(Error::MissingColumn("fine emotion label columns".into()));
                }
                LabelPlan::FineIndicators(found)
            }
            many => LabelPlan::FineIndicators(
                many.iter()
                    .map(|n| Ok((col(n)?, n.clone())))
                    .collect::<Result<_>>()?,
            ),
        },
    };

    let mut examples = Vec::new();
    let mut rejected = Vec::new();
    let mut total = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        total += 1;
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RowError {
                    row,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match build_example(&rec, row, source, text_idx, id_idx, &plan, taxonomy) {
            Ok(ex) => examples.push(ex),
            Err(message) => rejected.push(RowError { row, message }),
        }
    }
    if total == 0 {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    Ok(LoadReport {
        examples,
        rejected,
        total_rows: total,
    })
}

fn build_example(
    rec: &csv::StringRecord,
    row: usize,
    source: Source,
    text_idx: usize,
    id_idx: Option<usize>,
    plan: &LabelPlan,
    taxonomy: &EmotionTaxonomy,
) -> std::result::Result<TextExample, String> {
    let field = |i: usize| rec.get(i).ok_or_else(|| format!("missing field {}", i + 1));
    let text = field(text_idx)?.trim().to_string();
    let id = match id_idx {
        Some(i) => field(i)?.trim().to_string(),
        None => format!("{source}-{row}"),
    };
    if id.is_empty() {
        return Err("empty id".into());
    }
    let mut ex = TextExample {
        id,
        text,
        source,
        stress_label: None,
        emotion_vector: None,
        emotion_is_pseudo: false,
    };
    match plan {
        LabelPlan::Binary(i) => {
            ex.stress_label = Some(StressLabel::from_bool(parse_binary(field(*i)?)?));
        }
        LabelPlan::FineList(i) => {
            let raw = field(*i)?;
            let fine: Vec<&str> = raw
                .split([',', ';', '|'])
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|t| taxonomy.resolve_fine(t).map_err(|e| e.to_string()))
                .collect::<std::result::Result<_, _>>()?;
            ex.emotion_vector = Some(taxonomy.map_fine_to_ekman(&fine).map_err(|e| e.to_string())?);
        }
        LabelPlan::FineIndicators(cols) => {
            let mut fine = Vec::new();
            for (i, name) in cols {
                if parse_binary(field(*i)?)? {
                    fine.push(name.as_str());
                }
            }
            ex.emotion_vector = Some(taxonomy.map_fine_to_ekman(&fine).map_err(|e| e.to_string())?);
        }
    }
    ex.validate()?;
    Ok(ex)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n: usize,
    pub positives: usize,
    pub negatives: usize,
    pub unlabeled: usize,
    /// Percentage of examples labeled stressed.
    pub positive_pct: f64,
}

pub fn corpus_stats(examples: &[TextExample]) -> CorpusStats {
    let positives = examples
        .iter()
        .filter(|e| e.stress_label == Some(StressLabel::Stressed))
        .count();
    let negatives = examples
        .iter()
        .filter(|e| e.stress_label == Some(StressLabel::NotStressed))
        .count();
    let n = examples.len();
    CorpusStats {
        n,
        positives,
        negatives,
        unlabeled: n - positives - negatives,
        positive_pct: if n == 0 {
            0.0
        } else {
            100.0 * positives as f64 / n as f64
        },
    }
}

/// Exact partition sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub const fn new(train: usize, dev: usize, test: usize) -> Self {
        Self { train, dev, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }

    /// Floor train, floor dev, remainder to test.
    pub fn from_ratios(n: usize, train: f64, dev: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&dev) || train + dev > 1.0 {
            return Err(Error::Split(format!("bad ratios train {train}, dev {dev}")));
        }
        let t = (n as f64 * train).floor() as usize;
        let d = ((n as f64 * dev).floor() as usize).min(n - t);
        Ok(Self::new(t, d, n - t - d))
    }
}

impl FromStr for SplitCounts {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Split(format!("counts `{s}`: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => Ok(Self::new(*a, *b, *c)),
            _ => Err(Error::Split(format!("counts `{s}` must be A,B,C"))),
        }
    }
}

/// Published partition sizes.
pub mod published {
    use super::SplitCounts;

    pub const STRESS: SplitCounts = SplitCounts::new(2_122, 716, 715);
    pub const MINORITY: SplitCounts = SplitCounts::new(0, 175, 175);
    pub const EMOTION: SplitCounts = SplitCounts::new(42_409, 5_425, 5_426);

    pub const STRESS_TOTAL: usize = 3_553;
    pub const MINORITY_TOTAL: usize = 350;
    pub const EMOTION_TOTAL: usize = 58_009;
    pub const STRESS_POSITIVE_PCT: f64 = 52.3;
    pub const MINORITY_POSITIVE_PCT: f64 = 41.4;

    /// Training-set sizes used for each reduced fraction of the stress corpus.
    pub const REDUCTION_COUNTS: [(f64, usize); 5] = [
        (0.10, 212),
        (0.25, 530),
        (0.50, 1_060),
        (0.75, 1_591),
        (1.00, 2_122),
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub train: Vec<TextExample>,
    pub dev: Vec<TextExample>,
    pub test: Vec<TextExample>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts::new(self.train.len(), self.dev.len(), self.test.len())
    }

    pub fn partition(&self, p: Partition) -> &[TextExample] {
        match p {
            Partition::Train => &self.train,
            Partition::Dev => &self.dev,
            Partition::Test => &self.test,
        }
    }

    /// Train and dev only: the view handed to training and tuning.
    pub fn without_test(&self) -> TrainDev<'_> {
        TrainDev::new(
            format!("{}/train", self.name),
            &self.train,
            format!("{}/dev", self.name),
            &self.dev,
        )
    }

    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        for p in Partition::ALL {
            m.insert(
                format!("{}/{}", self.name, p.name()),
                content_checksum(self.partition(p)),
            );
        }
        m
    }
}

/// Training examples plus the dev set monitored for model selection. There
/// is no access path to any test partition through this type.
#[derive(Debug, Clone)]
pub struct TrainDev<'a> {
    pub train_name: String,
    pub train: &'a [TextExample],
    pub dev_name: String,
    pub dev: &'a [TextExample],
}

impl<'a> TrainDev<'a> {
    pub fn new(
        train_name: impl Into<String>,
        train: &'a [TextExample],
        dev_name: impl Into<String>,
        dev: &'a [TextExample],
    ) -> Self {
        Self {
            train_name: train_name.into(),
            train,
            dev_name: dev_name.into(),
            dev,
        }
    }

    /// Names and content checksums of both parts.
    pub fn access_log(&self) -> Vec<(String, String)> {
        vec![
            (self.train_name.clone(), content_checksum(self.train)),
            (self.dev_name.clone(), content_checksum(self.dev)),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Dev,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Dev, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Dev => "dev",
            Partition::Test => "test",
        }
    }
}

fn ensure_unique_ids(examples: &[TextExample]) -> Result<()> {
    let mut seen = HashSet::with_capacity(examples.len());
    for e in examples {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Split(format!("duplicate example id `{}`", e.id)));
        }
    }
    Ok(())
}

/// Seeded shuffle, then consecutive slices of the requested sizes.
pub fn split_dataset(
    name: &str,
    examples: &[TextExample],
    counts: SplitCounts,
    seed: u64,
) -> Result<DatasetSplit> {
    if counts.total() != examples.len() {
        return Err(Error::Split(format!(
            "counts {}+{}+{} = {} but {} examples supplied",
            counts.train,
            counts.dev,
            counts.test,
            counts.total(),
            examples.len()
        )));
    }
    ensure_unique_ids(examples)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |r: std::ops::Range<usize>| -> Vec<TextExample> {
        order[r].iter().map(|&i| examples[i].clone()).collect()
    };
    let a = counts.train;
    let b = a + counts.dev;
    Ok(DatasetSplit {
        name: name.to_string(),
        train: take(0..a),
        dev: take(a..b),
        test: take(b..examples.len()),
        seed,
    })
}

pub const REDUCTION_FRACTIONS: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 1.00];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionPlan {
    pub fraction: f64,
    pub target_count: usize,
    pub seed: u64,
}

fn check_fraction(fraction: f64) -> Result<()> {
    if REDUCTION_FRACTIONS
        .iter()
        .any(|f| (f - fraction).abs() < 1e-9)
    {
        Ok(())
    } else {
        Err(Error::Split(format!(
            "fraction {fraction} not in {REDUCTION_FRACTIONS:?}"
        )))
    }
}

impl ReductionPlan {
    /// Uses the published per-fraction training-set sizes.
    pub fn published(fraction: f64, seed: u64) -> Result<Self> {
        check_fraction(fraction)?;
        let target_count = published::REDUCTION_COUNTS
            .iter()
            .find(|(f, _)| (f - fraction).abs() < 1e-9)
            .map(|(_, c)| *c)
            .expect("fraction checked");
        Ok(Self {
            fraction,
            target_count,
            seed,
        })
    }

    /// `floor(fraction * full_train)`.
    pub fn proportional(fraction: f64, full_train: usize, seed: u64) -> Result<Self> {
        check_fraction(fraction)?;
        Ok(Self {
            fraction,
            target_count: (fraction * full_train as f64 + 1e-9).floor() as usize,
            seed,
        })
    }
}

/// Largest-remainder allocation of `target` across strata sizes.
fn allocate(target: usize, sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| target as f64 * s as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = target - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            rest -= 1;
        }
    }
    alloc
}

/// Class-stratified sample without replacement of the training partition.
/// Dev and test are untouched; kept examples retain their original order.
pub fn reduce_training_set(split: &DatasetSplit, plan: &ReductionPlan) -> Result<DatasetSplit> {
    check_fraction(plan.fraction)?;
    if plan.target_count > split.train.len() {
        return Err(Error::Split(format!(
            "target {} exceeds training set of {}",
            plan.target_count,
            split.train.len()
        )));
    }
    let mut strata: BTreeMap<Option<StressLabel>, Vec<usize>> = BTreeMap::new();
    for (i, e) in split.train.iter().enumerate() {
        strata.entry(e.stress_label).or_default().push(i);
    }
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let alloc = allocate(plan.target_count, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut keep = vec![false; split.train.len()];
    for (members, n) in strata.values().zip(alloc) {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        for &i in &m[..n] {
            keep[i] = true;
        }
    }
    let train = split
        .train
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(DatasetSplit {
        name: format!("{}@{:.2}", split.name, plan.fraction),
        train,
        dev: split.dev.clone(),
        test: split.test.clone(),
        seed: split.seed,
    })
}

const CANONICAL_FORMAT: &str = "emostress-corpus";
pub const CANONICAL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalHeader {
    format: String,
    version: u32,
    count: usize,
    sha256: String,
}

fn body_bytes(examples: &[TextExample]) -> Vec<u8> {
    let mut body = Vec::new();
    for e in examples {
        serde_json::to_writer(&mut body, e).expect("example serializes");
        body.push(b'\n');
    }
    body
}

/// SHA-256 of the canonical serialization of `examples`.
pub fn content_checksum(examples: &[TextExample]) -> String {
    hex::encode(Sha256::digest(body_bytes(examples)))
}

pub fn canonical_bytes(examples: &[TextExample]) -> Vec<u8> {
    let body = body_bytes(examples);
    let header = CanonicalHeader {
        format: CANONICAL_FORMAT.into(),
        version: CANONICAL_VERSION,
        count: examples.len(),
        sha256: hex::encode(Sha256::digest(&body)),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend(body);
    out
}

/// Writes a header line then one JSON record per line, atomically.
pub fn write_canonical(path: &Path, examples: &[TextExample]) -> Result<String> {
    let bytes = canonical_bytes(examples);
    crate::safetensors::write_atomic(path, &bytes)?;
    Ok(content_checksum(examples))
}

pub fn parse_canonical(bytes: &[u8]) -> Result<Vec<TextExample>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line (byte offset 0)".into()))?;
    let header: CanonicalHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad header at byte offset 0: {e}")))?;
    if header.format != CANONICAL_FORMAT {
        return Err(Error::Format(format!("unknown format `{}`", header.format)));
    }
    if header.version != CANONICAL_VERSION {
        return Err(Error::Format(format!(
            "version mismatch: file is v{}, reader supports v{CANONICAL_VERSION}",
            header.version
        )));
    }
    let body_start = nl + 1;
    let mut examples = Vec::with_capacity(header.count);
    let mut offset = body_start;
    for (i, line) in bytes[body_start..].split(|&b| b == b'\n').enumerate() {
        if line.is_empty() && offset >= bytes.len() {
            break;
        }
        let ex: TextExample = serde_json::from_slice(line).map_err(|e| {
            Error::Format(format!(
                "record {} at byte offset {offset}: {e}",
                i + 1
            ))
        })?;
        ex.validate().map_err(|m| {
            Error::Format(format!("record {} at byte offset {offset}: {m}", i + 1))
        })?;
        examples.push(ex);
        offset += line.len() + 1;
    }
    if examples.len() != header.count {
        return Err(Error::Format(format!(
            "header declares {} records, found {}",
            header.count,
            examples.len()
        )));
    }
    let actual = hex::encode(Sha256::digest(&bytes[body_start..]));
    if actual != header.sha256 {
        return Err(Error::Format(format!(
            "checksum failure: header {}, content {actual}",
            header.sha256
        )));
    }
    Ok(examples)
}

pub fn read_canonical(path: &Path) -> Result<Vec<TextExample>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_canonical(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Split manifest written next to the partition files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub name: String,
    pub seed: u64,
    pub counts: SplitCounts,
    pub checksums: BTreeMap<String, String>,
}

pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<SplitManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut checksums = BTreeMap::new();
    for p in Partition::ALL {
        let sum = write_canonical(&dir.join(format!("{}.jsonl", p.name())), split.partition(p))?;
        checksums.insert(p.name().to_string(), sum);
    }
    let manifest = SplitManifest {
        name: split.name.clone(),
        seed: split.seed,
        counts: split.counts(),
        checksums,
    };
    let mut f = fs::File::create(dir.join("split.json"))
        .map_err(|e| Error::io("writing split.json", e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io("writing split.json", e))?;
    Ok(manifest)
}

pub fn read_split(dir: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(dir.join("split.json"))
        .map_err(|e| Error::io(format!("reading {}/split.json", dir.display()), e))?;
    let m: SplitManifest = serde_json::from_str(&text)?;
    let read = |p: Partition| read_canonical(&dir.join(format!("{}.jsonl", p.name())));
    let split = DatasetSplit {
        name: m.name,
        train: read(Partition::Train)?,
        dev: read(Partition::Dev)?,
        test: read(Partition::Test)?,
        seed: m.seed,
    };
    if split.counts() != m.counts {
        return Err(Error::Format("split counts disagree with split.json".into()));
    }
    Ok(split)
}
