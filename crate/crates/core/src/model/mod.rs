//! The full classifier: embeddings, learnable combination tokens, pruned
//! attention blocks, one combining module, compact blocks on the combined
//! tokens, and a mean-pooled linear head.

mod checkpoint;
mod config;
mod metrics;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::combiner::{combining_module, CombinerWeights, GumbelMode};
use crate::error::{Error, Result};
use crate::fuzzy::ImportanceProfile;
use crate::init::{truncated_normal, zeros};
use crate::pruning::{block_forward, preserved_count, select_tokens, AttentionBlockWeights, AttentionSettings, Dropout, TokenSet};
use crate::tensor::{mac_count, Gradients, Tape, Tensor, Var};

pub use checkpoint::{load, save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, FF_MULTIPLIER, PAD_ID, UNK_ID};
pub use metrics::{classification_metrics, evaluate, Evaluation, Metrics};
pub use train::{train_step, AdamConfig, Optimizer, Schedule};

/// Offset mixed into the seed for the training-noise stream so it never
/// coincides with the initialisation stream.
const NOISE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeights<T = Tensor> {
    Attention(AttentionBlockWeights<T>),
    Combining(CombinerWeights<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = Tensor> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub combo_tokens: T,
    pub layers: Vec<LayerWeights<T>>,
    pub head: T,
    pub head_bias: T,
}

impl<T> ModelWeights<T> {
    /// Visits every parameter with a stable dotted name.
    pub fn visit(&self, f: &mut dyn FnMut(String, &T)) {
        f("embeddings.token".into(), &self.token_embedding);
        f("embeddings.position".into(), &self.position_embedding);
        f("combo_tokens".into(), &self.combo_tokens);
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerWeights::Attention(w) => w.visit(&format!("layers.{i}.attention."), f),
                LayerWeights::Combining(w) => w.visit(&format!("layers.{i}.combiner."), f),
            }
        }
        f("head.weight".into(), &self.head);
        f("head.bias".into(), &self.head_bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("embeddings.token".into(), &mut self.token_embedding);
        f("embeddings.position".into(), &mut self.position_embedding);
        f("combo_tokens".into(), &mut self.combo_tokens);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerWeights::Attention(w) => w.visit_mut(&format!("layers.{i}.attention."), f),
                LayerWeights::Combining(w) => w.visit_mut(&format!("layers.{i}.combiner."), f),
            }
        }
        f("head.weight".into(), &mut self.head);
        f("head.bias".into(), &mut self.head_bias);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelWeights<U> {
        ModelWeights {
            token_embedding: f(&self.token_embedding),
            position_embedding: f(&self.position_embedding),
            combo_tokens: f(&self.combo_tokens),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerWeights::Attention(w) => LayerWeights::Attention(w.map(f)),
                    LayerWeights::Combining(w) => LayerWeights::Combining(w.map(f)),
                })
                .collect(),
            head: f(&self.head),
            head_bias: f(&self.head_bias),
        }
    }
}

impl<T> ModelWeights<T> {
    /// Every parameter in the same order as [`ModelWeights::visit`].
    pub fn slots(&self) -> Vec<&T> {
        let mut out = vec![&self.token_embedding, &self.position_embedding, &self.combo_tokens];
        for layer in &self.layers {
            match layer {
                LayerWeights::Attention(w) => out.extend(w.slots()),
                LayerWeights::Combining(w) => out.extend(w.slots()),
            }
        }
        out.push(&self.head);
        out.push(&self.head_bias);
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding, &mut self.combo_tokens];
        for layer in &mut self.layers {
            match layer {
                LayerWeights::Attention(w) => out.extend(w.slots_mut()),
                LayerWeights::Combining(w) => out.extend(w.slots_mut()),
            }
        }
        out.push(&mut self.head);
        out.push(&mut self.head_bias);
        out
    }
}

impl ModelWeights<Tensor> {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let token_embedding = truncated_normal(&[config.vocab_size, d], rng);
        let position_embedding = truncated_normal(&[config.max_seq_len, d], rng);
        let combo_tokens = truncated_normal(&[config.active_combo_tokens(), d], rng);
        let layers = (1..=config.n_layers)
            .map(|l| {
                if config.placement == Some(l) {
                    LayerWeights::Combining(CombinerWeights::init(d, rng))
                } else {
                    LayerWeights::Attention(AttentionBlockWeights::init(d, config.ff_width(), rng))
                }
            })
            .collect();
        ModelWeights {
            token_embedding,
            position_embedding,
            combo_tokens,
            layers,
            head: truncated_normal(&[d, config.num_classes], rng),
            head_bias: zeros(&[config.num_classes]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelWeights<Var> {
        self.map(&mut |t| crate::params::bind_one(tape, t, trainable))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |t| Tensor::zeros(t.shape()))
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Gradient of every parameter, zero where none flowed.
    pub fn collect_grads(&self, bound: &ModelWeights<Var>, grads: &mut Gradients) -> ModelWeights<Tensor> {
        let mut it = bound.slots().into_iter().copied();
        self.map(&mut |t| {
            let v = it.next().expect("bound weights mirror stored weights");
            grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Attention over embedded and combination tokens with pruned keys.
    Pruned,
    Combining,
    /// Attention over the combined tokens only.
    Compact,
}

/// Token counts seen by one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub kind: LayerKind,
    pub queries: usize,
    /// Embedded tokens used as keys/values (or merged, for the combiner).
    pub embedded_keys: usize,
    pub combo_keys: usize,
    /// Size of the fuzzy-protected set computed by this layer.
    pub protected: usize,
}

impl LayerTrace {
    pub fn key_count(&self) -> usize {
        self.embedded_keys + self.combo_keys
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub layers: Vec<LayerTrace>,
    /// Matrix-product MACs spent in the encoder (excludes the head).
    pub encoder_macs: u64,
}

impl TokenTrace {
    /// Embedded key counts for the pruned and combining layers.
    pub fn embedded_chain(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.kind != LayerKind::Compact)
            .map(|l| l.embedded_keys)
            .collect()
    }

    pub fn key_counts(&self) -> Vec<usize> {
        self.layers.iter().map(LayerTrace::key_count).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub trace: TokenTrace,
    pub profiles: Vec<ImportanceProfile>,
}

struct TapeForward {
    logits: Var,
    trace: TokenTrace,
    profiles: Vec<ImportanceProfile>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub weights: ModelWeights,
    rng: ChaCha8Rng,
    step: u64,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = ModelWeights::init(&config, &mut init_rng);
        Ok(Model {
            config,
            weights,
            rng: ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM),
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn from_parts(config: ModelConfig, weights: ModelWeights, rng: ChaCha8Rng, step: u64) -> Self {
        Model {
            config,
            weights,
            rng,
            step,
        }
    }

    pub(crate) fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    fn settings(&self) -> AttentionSettings {
        AttentionSettings {
            heads: self.config.heads,
            alpha_importance: self.config.alpha_importance,
            alpha_unimportance: self.config.alpha_unimportance,
            fuzzy: self.config.fuzzy,
            attention_residual: self.config.attention_residual,
            ln_eps: self.config.ln_eps,
        }
    }

    /// Evaluation-mode forward pass: no Gumbel noise, no dropout.
    pub fn forward(&self, token_ids: &[usize]) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false);
        let out = run(&self.config, &self.settings(), &mut tape, &bound, token_ids, None)?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            trace: out.trace,
            profiles: out.profiles,
        })
    }

    /// Training-mode forward pass; advances the noise generator.
    pub fn forward_train(&mut self, token_ids: &[usize]) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false);
        let settings = self.settings();
        let out = run(&self.config, &settings, &mut tape, &bound, token_ids, Some(&mut self.rng))?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            trace: out.trace,
            profiles: out.profiles,
        })
    }

    pub fn predict(&self, token_ids: &[usize]) -> Result<usize> {
        let logits = self.forward(token_ids)?.logits;
        Ok(argmax(logits.data()))
    }

    /// Evaluation-mode cross-entropy loss.
    pub fn loss(&self, token_ids: &[usize], label: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false);
        let out = run(&self.config, &self.settings(), &mut tape, &bound, token_ids, None)?;
        let loss = tape.cross_entropy(out.logits, label)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Evaluation-mode loss and its gradient with respect to every weight.
    pub fn loss_and_grads(&self, token_ids: &[usize], label: usize) -> Result<(f64, ModelWeights)> {
        self.grads_inner(token_ids, label, None)
    }

    pub(crate) fn train_loss_and_grads(&mut self, token_ids: &[usize], label: usize) -> Result<(f64, ModelWeights)> {
        let mut rng = self.rng.clone();
        let result = self.grads_inner(token_ids, label, Some(&mut rng));
        self.rng = rng;
        result
    }

    fn grads_inner(
        &self,
        token_ids: &[usize],
        label: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, ModelWeights)> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, true);
        let out = run(&self.config, &self.settings(), &mut tape, &bound, token_ids, rng)?;
        let loss = tape.cross_entropy(out.logits, label)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        Ok((value, self.weights.collect_grads(&bound, &mut grads)))
    }

    pub(crate) fn advance_step(&mut self) {
        self.step += 1;
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Real (non-pad) tokens after truncation, with their original positions.
fn real_tokens(config: &ModelConfig, token_ids: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for (pos, &id) in token_ids.iter().take(config.max_seq_len).enumerate() {
        if id >= config.vocab_size {
            return Err(Error::Vocabulary {
                id,
                vocab_size: config.vocab_size,
            });
        }
        if id != PAD_ID {
            ids.push(id);
            positions.push(pos);
        }
    }
    Ok((ids, positions))
}

/// Builds the forward graph on `tape`. Pad tokens are removed before the
/// encoder, which is the same as masking them out of attention, scoring
/// and combining. `noise` switches on training-mode randomness.
fn run(
    config: &ModelConfig,
    settings: &AttentionSettings,
    tape: &mut Tape,
    w: &ModelWeights<Var>,
    token_ids: &[usize],
    mut noise: Option<&mut ChaCha8Rng>,
) -> Result<TapeForward> {
    let macs_before = mac_count();
    let (ids, positions) = real_tokens(config, token_ids)?;
    let seq_len = ids.len();
    let m = config.active_combo_tokens();
    if seq_len == 0 && m == 0 {
        return Err(Error::Data("input has no non-pad tokens".into()));
    }

    let tok = tape.index_rows(w.token_embedding, &ids)?;
    let pos = tape.index_rows(w.position_embedding, &positions)?;
    let embedded = tape.add(tok, pos)?;
    let mut x = tape.concat_rows(&[embedded, w.combo_tokens])?;

    let mut kept = TokenSet::full(seq_len, m, 1);
    let mut combined = false;
    let mut trace = Vec::with_capacity(config.n_layers);
    let mut profiles = Vec::new();

    for (idx, layer) in w.layers.iter().enumerate() {
        let l = idx + 1;
        match layer {
            LayerWeights::Attention(block) => {
                let mut dropout_ctx = match (&mut noise, config.dropout > 0.0) {
                    (Some(rng), true) => Some(Dropout {
                        rate: config.dropout,
                        rng,
                    }),
                    _ => None,
                };
                let (out, profile) = block_forward(tape, x, block, &kept, settings, dropout_ctx.as_mut())?;
                x = out;
                trace.push(LayerTrace {
                    layer: l,
                    kind: if combined { LayerKind::Compact } else { LayerKind::Pruned },
                    queries: kept.query_count(),
                    embedded_keys: kept.embedded_count(),
                    combo_keys: m,
                    protected: profile.protected.len(),
                });
                let prune_next = !combined && l < config.n_layers;
                if prune_next {
                    let t = kept.embedded_count();
                    let t_next = if t == 0 { 0 } else { preserved_count(t, config.preservation_ratio)? };
                    kept = select_tokens(&profile.scores, &profile.protected, t_next, &kept)?;
                } else {
                    kept = TokenSet::new(kept.seq_len(), kept.embedded().to_vec(), m, l + 1)?;
                }
                profiles.push(profile);
            }
            LayerWeights::Combining(cw) => {
                let emb_rows = tape.gather_rows(x, kept.embedded())?;
                let combo_rows: Vec<usize> = (seq_len..seq_len + m).collect();
                let combo = tape.gather_rows(x, &combo_rows)?;
                let gumbel = match (&mut noise, config.gumbel) {
                    (Some(rng), true) => GumbelMode::Sampled {
                        rng,
                        scope: config.gumbel_scope,
                    },
                    _ => GumbelMode::Disabled,
                };
                let out = combining_module(tape, emb_rows, combo, cw, gumbel, config.assignment, config.ln_eps)?;
                trace.push(LayerTrace {
                    layer: l,
                    kind: LayerKind::Combining,
                    queries: m,
                    embedded_keys: kept.embedded_count(),
                    combo_keys: m,
                    protected: 0,
                });
                x = out.tokens;
                combined = true;
                kept = TokenSet::full(0, m, l + 1);
            }
        }
    }

    let encoder_macs = mac_count() - macs_before;
    let pooled = tape.mean_rows(x)?;
    let logits = tape.linear(pooled, w.head, Some(w.head_bias))?;
    Ok(TapeForward {
        logits,
        trace: TokenTrace {
            layers: trace,
            encoder_macs,
        },
        profiles,
    })
}
