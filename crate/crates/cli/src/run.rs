//! One training run: data, vocabulary, training with validation-loss
//! model selection, test evaluation and the run report.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use token_thinner::cost::{model_cost, CostReport};
use token_thinner::model::{evaluate, train_step, Evaluation, LayerKind, Optimizer, Schedule};
use token_thinner::{Model, TokenTrace};

use crate::config::{DataConfig, RunConfig};
use crate::dataset::{ingest, Dataset, Format, Split};
use crate::error::{CliError, Result, ResultExt};
use crate::synth::{synth_task, SynthSpec};
use crate::tokenizer::Vocabulary;

pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "model.ttc";
pub const VOCAB_FILE: &str = "vocab.json";

/// Seed offsets for independent random streams derived from the run seed.
const TEST_DATA_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Resolves the configured data source into train/val/test splits.
pub fn load_splits(config: &RunConfig) -> Result<Splits> {
    let seed = config.seed;
    let val_fraction = config.train.val_fraction;
    let (full_train, test) = match &config.data {
        DataConfig::Synthetic {
            kind,
            train_size,
            test_size,
            seq_len,
        } => {
            let train = synth_task(&SynthSpec::new(*kind, *train_size, *seq_len, seed))?;
            let test = synth_task(&SynthSpec::new(*kind, *test_size, *seq_len, seed.wrapping_add(TEST_DATA_STREAM)))?;
            (train, test)
        }
        DataConfig::Files {
            train,
            test,
            format,
            label_map,
        } => {
            let fmt = |p: &Path| {
                format
                    .or_else(|| Format::from_path(p))
                    .ok_or_else(|| CliError::Config(format!("cannot infer the format of {}", p.display())))
            };
            let all = ingest(train, fmt(train)?, label_map.as_deref()).context(|| format!("reading {}", train.display()))?;
            let test_set = match test {
                Some(path) => {
                    ingest(path, fmt(path)?, label_map.as_deref()).context(|| format!("reading {}", path.display()))?
                }
                None => all.tagged(Split::Test),
            };
            let train_set = if all.has_tags() {
                let mut rest = all.clone();
                rest.examples.retain(|e| e.split != Some(Split::Test));
                rest
            } else {
                all
            };
            (train_set, test_set)
        }
    };
    let (train, val) = if full_train.examples.iter().any(|e| e.split == Some(Split::Val)) {
        (full_train.tagged(Split::Train), full_train.tagged(Split::Val))
    } else {
        full_train.split_train_val(val_fraction, seed.wrapping_add(SPLIT_STREAM))?
    };
    train.require_non_empty("train")?;
    val.require_non_empty("validation")?;
    test.require_non_empty("test")?;
    let classes = config.model.num_classes;
    for ds in [&train, &val, &test] {
        if let Some(e) = ds.examples.iter().find(|e| e.label >= classes) {
            return Err(CliError::Data(format!(
                "label {} out of range for a {classes}-class model",
                e.label
            )));
        }
    }
    Ok(Splits { train, val, test })
}

pub type Encoded = Vec<(Vec<usize>, usize)>;

pub fn encode(dataset: &Dataset, vocab: &Vocabulary, max_len: usize) -> Encoded {
    dataset
        .examples
        .iter()
        .map(|e| (vocab.tokenize(&e.text, max_len), e.label))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Evaluation,
}

/// Key counts one layer saw across a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTokens {
    pub layer: usize,
    pub kind: LayerKind,
    pub mean_keys: f64,
    pub min_keys: usize,
    pub max_keys: usize,
    pub mean_protected: f64,
}

pub fn summarize_traces(traces: &[TokenTrace]) -> Vec<LayerTokens> {
    let Some(first) = traces.first() else {
        return Vec::new();
    };
    let n = traces.len() as f64;
    (0..first.layers.len())
        .map(|l| {
            let keys: Vec<usize> = traces.iter().map(|t| t.layers[l].key_count()).collect();
            LayerTokens {
                layer: first.layers[l].layer,
                kind: first.layers[l].kind,
                mean_keys: keys.iter().sum::<usize>() as f64 / n,
                min_keys: *keys.iter().min().expect("non-empty"),
                max_keys: *keys.iter().max().expect("non-empty"),
                mean_protected: traces.iter().map(|t| t.layers[l].protected).sum::<usize>() as f64 / n,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub classes: Vec<String>,
    pub vocab_size: usize,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: RunConfig,
    pub data: DataSummary,
    pub epochs: Vec<EpochRecord>,
    /// 0 when the untrained model was kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test: Evaluation,
    /// Per-layer key counts over the test set.
    pub token_trace: Vec<LayerTokens>,
    /// Analytical cost at the full sequence budget.
    pub cost: CostReport,
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Copy with the timing field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub model: Model,
    pub vocab: Vocabulary,
}

/// Trains and evaluates; writes the report, best checkpoint and vocabulary
/// into `out` when given.
pub fn run(config: &RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let started = Instant::now();
    let seed = config.seed;
    let splits = load_splits(config)?;
    let max_len = config.model.max_seq_len;
    let vocab = Vocabulary::build(splits.train.examples.iter().map(|e| e.text.as_str()), config.model.vocab_size)?;
    let train = encode(&splits.train, &vocab, max_len);
    let val = encode(&splits.val, &vocab, max_len);
    let test = encode(&splits.test, &vocab, max_len);

    let mut model = Model::build(config.model.clone(), seed)?;
    let tc = &config.train;
    let mut optimizer = Optimizer::new(&model, tc.adam);
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total_steps = (steps_per_epoch * tc.epochs) as u64;
    let schedule = Schedule {
        peak_lr: tc.learning_rate,
        warmup_steps: (total_steps as f64 * tc.warmup_fraction).round() as u64,
        total_steps,
    };

    let initial = evaluate(&model, &val).context(|| "validating the initial model".to_string())?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val_loss = initial.loss;
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(SHUFFLE_STREAM));

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Encoded = chunk.iter().map(|&i| train[i].clone()).collect();
            let loss = train_step(&mut model, &mut optimizer, &schedule, &batch)
                .context(|| format!("epoch {epoch}, step {}", model.step()))?;
            loss_sum += loss * batch.len() as f64;
        }
        let val_eval = evaluate(&model, &val).context(|| format!("validating epoch {epoch}"))?;
        if val_eval.loss < best_val_loss {
            best_val_loss = val_eval.loss;
            best_epoch = epoch;
            best = model.clone();
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val: val_eval,
        });
    }

    let test_eval = evaluate(&best, &test).context(|| "evaluating on the test split".to_string())?;
    let traces = test
        .iter()
        .map(|(ids, _)| best.forward(ids).map(|o| o.trace))
        .collect::<token_thinner::Result<Vec<_>>>()?;
    let report = RunReport {
        seed,
        config: config.clone(),
        data: DataSummary {
            train: train.len(),
            val: val.len(),
            test: test.len(),
            classes: splits.train.label_names.clone(),
            vocab_size: vocab.len(),
            provenance: splits.train.provenance.clone(),
        },
        epochs,
        best_epoch,
        best_val_loss,
        test: test_eval,
        token_trace: summarize_traces(&traces),
        cost: model_cost(&config.model)?,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        report.save(&dir.join(REPORT_FILE))?;
        token_thinner::model::save(&best, dir.join(CHECKPOINT_FILE))?;
        vocab.save(&dir.join(VOCAB_FILE))?;
    }
    Ok(RunOutcome {
        report,
        model: best,
        vocab,
    })
}
