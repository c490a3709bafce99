//! The seven-label coarse emotion space (Ekman's six basic emotions plus
//! neutral) and the fine-to-coarse relabeling of the 28-label emotion corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of coarse labels.
pub const NUM_EMOTIONS: usize = 7;

/// Number of fine labels the relabeling fixture must cover.
pub const NUM_FINE_LABELS: usize = 28;

/// The shipped fine-to-coarse grouping, in the corpus' own label-id order.
pub const DEFAULT_MAPPING: &str = include_str!("../fixtures/ekman_mapping.tsv");

/// Reference per-label counts for the full relabeled emotion corpus.
pub const REFERENCE_COUNTS: [(CoarseEmotion, usize); NUM_EMOTIONS] = [
    (CoarseEmotion::Anger, 7_022),
    (CoarseEmotion::Disgust, 1_013),
    (CoarseEmotion::Fear, 929),
    (CoarseEmotion::Joy, 21_733),
    (CoarseEmotion::Sadness, 4_032),
    (CoarseEmotion::Surprise, 6_668),
    (CoarseEmotion::Neutral, 17_772),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseEmotion {
    Anger,
    Disgust,
    Fear,
    Joy,
    Sadness,
    Surprise,
    Neutral,
}

impl CoarseEmotion {
    /// Frozen label order. Emotion vectors and emotion-head logits use it.
    pub const ALL: [CoarseEmotion; NUM_EMOTIONS] = [
        CoarseEmotion::Anger,
        CoarseEmotion::Disgust,
        CoarseEmotion::Fear,
        CoarseEmotion::Joy,
        CoarseEmotion::Sadness,
        CoarseEmotion::Surprise,
        CoarseEmotion::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CoarseEmotion::Anger => "anger",
            CoarseEmotion::Disgust => "disgust",
            CoarseEmotion::Fear => "fear",
            CoarseEmotion::Joy => "joy",
            CoarseEmotion::Sadness => "sadness",
            CoarseEmotion::Surprise => "surprise",
            CoarseEmotion::Neutral => "neutral",
        }
    }
}

impl fmt::Display for CoarseEmotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoarseEmotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CoarseEmotion::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Taxonomy(format!("unknown coarse label `{s}`")))
    }
}

/// Seven binary indicators in [`CoarseEmotion::ALL`] order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmotionVector(pub [bool; NUM_EMOTIONS]);

impl EmotionVector {
    pub fn from_labels<I: IntoIterator<Item = CoarseEmotion>>(labels: I) -> Self {
        let mut v = EmotionVector::default();
        for l in labels {
            v.0[l.index()] = true;
        }
        v
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.len() != NUM_EMOTIONS {
            return Err(Error::Shape(format!(
                "emotion vector needs {NUM_EMOTIONS} entries, got {}",
                bits.len()
            )));
        }
        let mut v = EmotionVector::default();
        for (i, &b) in bits.iter().enumerate() {
            v.0[i] = match b {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::Taxonomy(format!(
                        "emotion indicator must be 0 or 1, got {other}"
                    )))
                }
            };
        }
        Ok(v)
    }

    pub fn bits(&self) -> [u8; NUM_EMOTIONS] {
        self.0.map(u8::from)
    }

    pub fn get(&self, label: CoarseEmotion) -> bool {
        self.0[label.index()]
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn active(&self) -> impl Iterator<Item = CoarseEmotion> + '_ {
        CoarseEmotion::ALL.into_iter().filter(|l| self.get(*l))
    }

    /// Indicators as 0.0/1.0 targets.
    pub fn as_targets(&self) -> [f64; NUM_EMOTIONS] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }
}

impl fmt::Display for EmotionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits = self.bits();
        write!(f, "[")?;
        for (i, b) in bits.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{b}")?;
        }
        write!(f, "]")
    }
}

/// Fine-label to coarse-label table plus the fine-label id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionTaxonomy {
    fine_order: Vec<String>,
    mapping: BTreeMap<String, CoarseEmotion>,
}

impl EmotionTaxonomy {
    /// The shipped grouping.
    pub fn ekman() -> Self {
        Self::parse(DEFAULT_MAPPING).expect("shipped mapping fixture is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading taxonomy {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Parses `fine<TAB>coarse` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut fine_order = Vec::new();
        let mut mapping = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (fine, coarse) = line.split_once('\t').ok_or_else(|| {
                Error::Taxonomy(format!("line {}: expected `fine<TAB>coarse`", lineno + 1))
            })?;
            let fine = fine.trim().to_lowercase();
            let coarse: CoarseEmotion = coarse
                .parse()
                .map_err(|e| Error::Taxonomy(format!("line {}: {e}", lineno + 1)))?;
            if mapping.insert(fine.clone(), coarse).is_some() {
                return Err(Error::Taxonomy(format!(
                    "line {}: fine label `{fine}` mapped twice",
                    lineno + 1
                )));
            }
            fine_order.push(fine);
        }
        if fine_order.len() != NUM_FINE_LABELS {
            return Err(Error::Taxonomy(format!(
                "mapping must cover exactly {NUM_FINE_LABELS} fine labels, found {}",
                fine_order.len()
            )));
        }
        Ok(Self {
            fine_order,
            mapping,
        })
    }

    /// Fine labels in id order.
    pub fn fine_labels(&self) -> &[String] {
        &self.fine_order
    }

    pub fn coarse_of(&self, fine: &str) -> Result<CoarseEmotion> {
        let key = fine.trim().to_lowercase();
        self.mapping
            .get(&key)
            .copied()
            .ok_or_else(|| Error::Taxonomy(format!("unknown fine label `{fine}`")))
    }

    /// Resolves a fine label given either by name or by numeric id.
    pub fn resolve_fine(&self, token: &str) -> Result<&str> {
        let token = token.trim();
        if let Ok(id) = token.parse::<usize>() {
            return self
                .fine_order
                .get(id)
                .map(String::as_str)
                .ok_or_else(|| Error::Taxonomy(format!("fine label id {id} out of range")));
        }
        let key = token.to_lowercase();
        self.fine_order
            .iter()
            .find(|f| **f == key)
            .map(String::as_str)
            .ok_or_else(|| Error::Taxonomy(format!("unknown fine label `{token}`")))
    }

    /// Maps a non-empty set of fine labels to its coarse indicator vector.
    pub fn map_fine_to_ekman<S: AsRef<str>>(&self, fine_labels: &[S]) -> Result<EmotionVector> {
        if fine_labels.is_empty() {
            return Err(Error::Taxonomy("gold emotion label set is empty".into()));
        }
        let mut v = EmotionVector::default();
        for f in fine_labels {
            v.0[self.coarse_of(f.as_ref())?.index()] = true;
        }
        Ok(v)
    }
}

impl Default for EmotionTaxonomy {
    fn default() -> Self {
        Self::ekman()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelCount {
    pub label: CoarseEmotion,
    pub count: usize,
    /// Share of examples carrying the label, in percent.
    pub proportion: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaxonomyReport {
    pub n_examples: usize,
    pub counts: Vec<LabelCount>,
}

impl TaxonomyReport {
    pub fn count(&self, label: CoarseEmotion) -> usize {
        self.counts[label.index()].count
    }

    /// Labels whose count differs from the reference table.
    pub fn mismatches(&self) -> Vec<(CoarseEmotion, usize, usize)> {
        REFERENCE_COUNTS
            .iter()
            .filter(|(l, want)| self.count(*l) != *want)
            .map(|(l, want)| (*l, self.count(*l), *want))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>8}\n", "label", "count", "share");
        let mut rows: Vec<_> = self.counts.iter().collect();
        rows.sort_by(|a, b| b.count.cmp(&a.count));
        for c in rows {
            out.push_str(&format!(
                "{:<10} {:>8} {:>7.1}%\n",
                c.label.name(),
                c.count,
                c.proportion
            ));
        }
        out.push_str(&format!("{:<10} {:>8}\n", "examples", self.n_examples));
        out
    }
}

/// Per-label counts over relabeled emotion vectors.
pub fn validate_taxonomy<'a, I>(vectors: I) -> TaxonomyReport
where
    I: IntoIterator<Item = &'a EmotionVector>,
{
    let mut counts = [0usize; NUM_EMOTIONS];
    let mut n = 0usize;
    for v in vectors {
        n += 1;
        for (c, &b) in counts.iter_mut().zip(v.0.iter()) {
            *c += usize::from(b);
        }
    }
    let counts = CoarseEmotion::ALL
        .iter()
        .map(|&label| LabelCount {
            label,
            count: counts[label.index()],
            proportion: if n == 0 {
                0.0
            } else {
                100.0 * counts[label.index()] as f64 / n as f64
            },
        })
        .collect();
    TaxonomyReport {
        n_examples: n,
        counts,
    }
}

/// Distinct coarse labels reached by the mapping.
pub fn coarse_coverage(tax: &EmotionTaxonomy) -> BTreeSet<CoarseEmotion> {
    tax.fine_labels()
        .iter()
        .filter_map(|f| tax.coarse_of(f).ok())
        .collect()
}
