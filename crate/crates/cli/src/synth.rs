//! Seeded synthetic classification tasks.
//!
//! Every example is `seq_len` space-separated words. Filler words are
//! `w0` … `w199`, drawn uniformly. Exactly `round(size · positive_fraction)`
//! examples get label 1, placed by a seeded shuffle.
//!
//! - `keyword-flag`: positives contain one to three trigger words
//!   (`kwa`, `kwb`, `kwc`) at random positions; negatives contain none.
//! - `majority-class`: a random number of markers `ma` and `mb` (at least
//!   three, odd); the label is 1 when `mb` is the more frequent one.
//! - `positional-pair`: markers `pa` and `pb` appear once each; the label
//!   is 1 when they are at most three positions apart.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example};
use crate::error::{CliError, Result};

pub const FILLER_WORDS: usize = 200;
pub const TRIGGERS: [&str; 3] = ["kwa", "kwb", "kwc"];
pub const PAIR_WINDOW: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    KeywordFlag,
    MajorityClass,
    PositionalPair,
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "keyword-flag" => Ok(TaskKind::KeywordFlag),
            "majority-class" => Ok(TaskKind::MajorityClass),
            "positional-pair" => Ok(TaskKind::PositionalPair),
            other => Err(format!(
                "unknown task `{other}` (expected keyword-flag, majority-class or positional-pair)"
            )),
        }
    }
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::KeywordFlag => "keyword-flag",
            TaskKind::MajorityClass => "majority-class",
            TaskKind::PositionalPair => "positional-pair",
        }
    }

    fn label_names(self) -> [&'static str; 2] {
        match self {
            TaskKind::KeywordFlag => ["absent", "present"],
            TaskKind::MajorityClass => ["more-ma", "more-mb"],
            TaskKind::PositionalPair => ["apart", "near"],
        }
    }

    fn min_len(self) -> usize {
        match self {
            TaskKind::KeywordFlag => 1,
            TaskKind::MajorityClass => 3,
            TaskKind::PositionalPair => PAIR_WINDOW + 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: TaskKind,
    pub size: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default = "half")]
    pub positive_fraction: f64,
}

fn half() -> f64 {
    0.5
}

impl SynthSpec {
    pub fn new(kind: TaskKind, size: usize, seq_len: usize, seed: u64) -> Self {
        SynthSpec {
            kind,
            size,
            seq_len,
            seed,
            positive_fraction: 0.5,
        }
    }
}

fn filler(rng: &mut ChaCha8Rng) -> String {
    format!("w{}", rng.random_range(0..FILLER_WORDS))
}

fn keyword_flag(rng: &mut ChaCha8Rng, len: usize, positive: bool) -> Vec<String> {
    let mut words: Vec<String> = (0..len).map(|_| filler(rng)).collect();
    if positive {
        let count = rng.random_range(1..=3.min(len));
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(rng);
        for &slot in &slots[..count] {
            words[slot] = TRIGGERS[rng.random_range(0..TRIGGERS.len())].to_string();
        }
    }
    words
}

fn majority_class(rng: &mut ChaCha8Rng, len: usize, positive: bool) -> Vec<String> {
    let max_markers = (len / 3).max(3);
    let mut total = rng.random_range(3..=max_markers);
    if total % 2 == 0 {
        total -= 1;
    }
    let majority = rng.random_range(total / 2 + 1..=total);
    let (winner, loser) = if positive { ("mb", "ma") } else { ("ma", "mb") };
    let mut words: Vec<String> = (0..len).map(|_| filler(rng)).collect();
    let mut slots: Vec<usize> = (0..len).collect();
    slots.shuffle(rng);
    for (k, &slot) in slots[..total].iter().enumerate() {
        words[slot] = if k < majority { winner } else { loser }.to_string();
    }
    words
}

fn positional_pair(rng: &mut ChaCha8Rng, len: usize, positive: bool) -> Vec<String> {
    let mut words: Vec<String> = (0..len).map(|_| filler(rng)).collect();
    let (i, j) = loop {
        let i = rng.random_range(0..len);
        let j = rng.random_range(0..len);
        if i == j {
            continue;
        }
        if (i.abs_diff(j) <= PAIR_WINDOW) == positive {
            break (i, j);
        }
    };
    words[i] = "pa".to_string();
    words[j] = "pb".to_string();
    words
}

pub fn synth_task(spec: &SynthSpec) -> Result<Dataset> {
    if spec.size == 0 {
        return Err(CliError::Config("synthetic size must be at least 1".into()));
    }
    if spec.seq_len < spec.kind.min_len() {
        return Err(CliError::Config(format!(
            "{} needs sequences of at least {} words, got {}",
            spec.kind.name(),
            spec.kind.min_len(),
            spec.seq_len
        )));
    }
    if !(0.0..=1.0).contains(&spec.positive_fraction) {
        return Err(CliError::Config(format!(
            "positive fraction {} outside [0, 1]",
            spec.positive_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let positives = (spec.size as f64 * spec.positive_fraction).round() as usize;
    let mut labels: Vec<usize> = (0..spec.size).map(|i| usize::from(i < positives)).collect();
    labels.shuffle(&mut rng);

    let examples = labels
        .into_iter()
        .map(|label| {
            let positive = label == 1;
            let words = match spec.kind {
                TaskKind::KeywordFlag => keyword_flag(&mut rng, spec.seq_len, positive),
                TaskKind::MajorityClass => majority_class(&mut rng, spec.seq_len, positive),
                TaskKind::PositionalPair => positional_pair(&mut rng, spec.seq_len, positive),
            };
            Example {
                text: words.join(" "),
                label,
                split: None,
            }
        })
        .collect();
    Ok(Dataset {
        examples,
        label_names: spec.kind.label_names().iter().map(|s| s.to_string()).collect(),
        split: None,
        provenance: format!(
            "synthetic {} size={} seq_len={} seed={}",
            spec.kind.name(),
            spec.size,
            spec.seq_len,
            spec.seed
        ),
    })
}
