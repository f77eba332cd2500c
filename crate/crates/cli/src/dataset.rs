//! Labeled text datasets read from CSV or JSON-lines files.
//!
//! Both formats carry a `text` field and a `label` field; an optional
//! `split` field (`train`, `val`, `test`) keeps a predefined split. Labels
//! may be integers or strings. String labels are resolved through a
//! mapping file (a JSON object from name to id) when one is given,
//! otherwise ids follow the sorted order of the distinct names.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "json" => Ok(Format::Jsonl),
            other => Err(format!("unknown format `{other}` (expected csv or jsonl)")),
        }
    }
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Format> {
        path.extension()?.to_str()?.parse().ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub label_names: Vec<String>,
    pub split: Option<Split>,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.label_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    fn subset(&self, examples: Vec<Example>, split: Split, note: &str) -> Dataset {
        Dataset {
            examples,
            label_names: self.label_names.clone(),
            split: Some(split),
            provenance: format!("{} [{note}]", self.provenance),
        }
    }

    /// Examples tagged with `split` in the source file.
    pub fn tagged(&self, split: Split) -> Dataset {
        let examples = self.examples.iter().filter(|e| e.split == Some(split)).cloned().collect();
        self.subset(examples, split, &format!("tagged {split:?}"))
    }

    pub fn has_tags(&self) -> bool {
        self.examples.iter().any(|e| e.split.is_some())
    }

    /// Seeded shuffle, then the first `val_fraction` of rows become the
    /// validation split and the rest the training split.
    pub fn split_train_val(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(CliError::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        let pick = |idx: &[usize], split| {
            idx.iter()
                .map(|&i| Example {
                    split: Some(split),
                    ..self.examples[i].clone()
                })
                .collect::<Vec<_>>()
        };
        let val = pick(&order[..n_val], Split::Val);
        let train = pick(&order[n_val..], Split::Train);
        Ok((
            self.subset(train, Split::Train, &format!("seeded split {seed}")),
            self.subset(val, Split::Val, &format!("seeded split {seed}")),
        ))
    }

    /// Fails when a command needs examples and there are none.
    pub fn require_non_empty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(CliError::Data(format!("{what} split is empty")))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug)]
enum RawLabel {
    Id(usize),
    Name(String),
}

struct RawRow {
    line: usize,
    text: String,
    label: RawLabel,
    split: Option<Split>,
}

fn parse_label(raw: &str) -> RawLabel {
    match raw.trim().parse::<usize>() {
        Ok(id) => RawLabel::Id(id),
        Err(_) => RawLabel::Name(raw.trim().to_string()),
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> CliError {
    CliError::Malformed {
        line,
        reason: reason.into(),
    }
}

fn read_csv(path: &Path) -> Result<Vec<RawRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let text_col = column("text").ok_or_else(|| malformed(1, "missing `text` column"))?;
    let label_col = column("label").ok_or_else(|| malformed(1, "missing `label` column"))?;
    let split_col = column("split");
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            malformed(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(i).ok_or_else(|| malformed(line, format!("missing field {}", i + 1)));
        let split = match split_col {
            Some(i) if !field(i)?.trim().is_empty() => Some(field(i)?.parse().map_err(|e: String| malformed(line, e))?),
            _ => None,
        };
        let label = field(label_col)?;
        if label.trim().is_empty() {
            return Err(malformed(line, "empty label"));
        }
        rows.push(RawRow {
            line,
            text: field(text_col)?.to_string(),
            label: parse_label(label),
            split,
        });
    }
    Ok(rows)
}

fn read_jsonl(path: &Path) -> Result<Vec<RawRow>> {
    let content = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| malformed(line_no, e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| malformed(line_no, "expected a JSON object"))?;
        let text = obj
            .get("text")
            .and_then(|v| v.as_str())
            .ok_or_else(|| malformed(line_no, "missing string field `text`"))?;
        let label = match obj.get("label") {
            Some(serde_json::Value::Number(n)) => RawLabel::Id(
                n.as_u64()
                    .ok_or_else(|| malformed(line_no, format!("label {n} is not a non-negative integer")))?
                    as usize,
            ),
            Some(serde_json::Value::String(s)) => parse_label(s),
            _ => return Err(malformed(line_no, "missing field `label`")),
        };
        let split = match obj.get("split").and_then(|v| v.as_str()) {
            Some(s) => Some(s.parse().map_err(|e: String| malformed(line_no, e))?),
            None => None,
        };
        rows.push(RawRow {
            line: line_no,
            text: text.to_string(),
            label,
            split,
        });
    }
    Ok(rows)
}

/// Reads a label mapping: a JSON object from label name to class id.
pub fn read_label_map(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path)?;
    let map: BTreeMap<String, usize> = serde_json::from_str(&text)?;
    let ids: BTreeSet<usize> = map.values().copied().collect();
    if ids.len() != map.len() || ids.iter().enumerate().any(|(i, &id)| i != id) {
        return Err(CliError::Mapping(
            "label ids in the mapping must be distinct and cover 0..count".into(),
        ));
    }
    Ok(map)
}

/// Loads every row of `path`. Splits are not applied here; see
/// [`Dataset::tagged`] and [`Dataset::split_train_val`].
pub fn ingest(path: &Path, format: Format, label_map: Option<&Path>) -> Result<Dataset> {
    let rows = match format {
        Format::Csv => read_csv(path)?,
        Format::Jsonl => read_jsonl(path)?,
    };
    let mapping = label_map.map(read_label_map).transpose()?;

    let names: BTreeSet<&str> = rows
        .iter()
        .filter_map(|r| match &r.label {
            RawLabel::Name(n) => Some(n.as_str()),
            RawLabel::Id(_) => None,
        })
        .collect();
    let (label_names, lookup): (Vec<String>, BTreeMap<String, usize>) = match &mapping {
        Some(map) => {
            let mut names = vec![String::new(); map.len()];
            for (name, &id) in map {
                names[id] = name.clone();
            }
            (names, map.clone())
        }
        None if !names.is_empty() => {
            if rows.iter().any(|r| matches!(r.label, RawLabel::Id(_))) {
                return Err(CliError::Mapping(
                    "mixed integer and string labels need a mapping file".into(),
                ));
            }
            let names: Vec<String> = names.into_iter().map(String::from).collect();
            let lookup = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
            (names, lookup)
        }
        None => {
            let max = rows
                .iter()
                .map(|r| match r.label {
                    RawLabel::Id(id) => id,
                    RawLabel::Name(_) => 0,
                })
                .max();
            let count = max.map_or(0, |m| m + 1);
            ((0..count).map(|i| i.to_string()).collect(), BTreeMap::new())
        }
    };

    let mut examples = Vec::with_capacity(rows.len());
    for row in rows {
        let label = match row.label {
            RawLabel::Id(id) => {
                if mapping.is_some() && id >= label_names.len() {
                    return Err(CliError::Mapping(format!(
                        "line {}: label id {id} outside the mapping's {} classes",
                        row.line,
                        label_names.len()
                    )));
                }
                id
            }
            RawLabel::Name(name) => *lookup
                .get(&name)
                .ok_or_else(|| CliError::Mapping(format!("line {}: unknown label `{name}`", row.line)))?,
        };
        examples.push(Example {
            text: row.text,
            label,
            split: row.split,
        });
    }
    Ok(Dataset {
        examples,
        label_names,
        split: None,
        provenance: format!("ingested from {}", path.display()),
    })
}

/// Writes a dataset as CSV or JSON lines, one example per row.
pub fn write_to<W: Write>(dataset: &Dataset, out: W, format: Format) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["text", "label", "split"])?;
            for e in &dataset.examples {
                let split = e.split.map(split_name).unwrap_or("");
                w.write_record([e.text.as_str(), &e.label.to_string(), split])?;
            }
            w.flush()?;
        }
        Format::Jsonl => {
            let mut out = io::BufWriter::new(out);
            for e in &dataset.examples {
                serde_json::to_writer(&mut out, e)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

pub fn write(dataset: &Dataset, path: &Path, format: Format) -> Result<()> {
    write_to(dataset, fs::File::create(path)?, format)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}
