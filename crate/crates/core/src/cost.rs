//! Analytical compute and activation-memory accounting.
//!
//! Counting rules:
//!
//! | term                | multiply-accumulates            |
//! |---------------------|---------------------------------|
//! | query projection    | n_q · d²                        |
//! | key/value proj.     | 2 · n_kv · d²                   |
//! | attention scores    | n_q · n_kv · d                  |
//! | attention context   | n_q · n_kv · d                  |
//! | output projection   | n_q · d²                        |
//! | feed-forward        | 2 · n_q · d · 4d                |
//! | combiner projection | (2m + 2t) · d²                  |
//! | combiner similarity | m · t · d                       |
//! | combiner merge      | m · t · d                       |
//!
//! One multiply-accumulate is two FLOPs. Softmax, layer norm, GELU, bias
//! and residual additions are not counted. Keys and values are projected
//! from the retained rows only, so pruning shrinks the key/value
//! projections as well as both attention products. The classification
//! head is reported separately and excluded from the encoder total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelConfig, TokenTrace, FF_MULTIPLIER};
use crate::pruning::preserved_count;

pub const FLOPS_PER_MAC: u64 = 2;

/// Bytes per stored activation (32-bit floats).
pub const BYTES_PER_ACTIVATION: u64 = 4;

/// Batch size used for the reported memory figures.
pub const REPORT_BATCH: u64 = 16;

/// Multiply-accumulate counts for one layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBreakdown {
    pub layer: usize,
    pub kind: Option<LayerKind>,
    pub queries: usize,
    pub keys: usize,
    pub query_projection: u64,
    pub key_value_projection: u64,
    pub scores: u64,
    pub context: u64,
    pub output_projection: u64,
    pub feed_forward: u64,
    pub combine_projection: u64,
    pub combine_similarity: u64,
    pub combine_merge: u64,
    /// Activations alive while this layer runs, for a single example.
    pub activation_elements: u64,
}

impl LayerBreakdown {
    pub fn macs(&self) -> u64 {
        self.query_projection
            + self.key_value_projection
            + self.scores
            + self.context
            + self.output_projection
            + self.feed_forward
            + self.combine_projection
            + self.combine_similarity
            + self.combine_merge
    }

    pub fn flops(&self) -> u64 {
        self.macs() * FLOPS_PER_MAC
    }
}

/// Attention block with `n_q` query rows and `n_kv` key/value rows.
pub fn layer_flops(n_q: usize, n_kv: usize, d: usize, h: usize) -> LayerBreakdown {
    let (q, kv, d64, h64) = (n_q as u64, n_kv as u64, d as u64, h as u64);
    let ff = FF_MULTIPLIER as u64 * d64;
    LayerBreakdown {
        queries: n_q,
        keys: n_kv,
        query_projection: q * d64 * d64,
        key_value_projection: 2 * kv * d64 * d64,
        scores: q * kv * d64,
        context: q * kv * d64,
        output_projection: q * d64 * d64,
        feed_forward: 2 * q * d64 * ff,
        // input, Q, K, V, per-head probabilities, context, FF hidden, output
        activation_elements: q * d64 + q * d64 + 2 * kv * d64 + h64 * q * kv + q * d64 + q * ff + q * d64,
        ..LayerBreakdown::default()
    }
}

/// Combining module merging `t` embedded tokens into `m` combination tokens.
pub fn combiner_flops(m: usize, t: usize, d: usize) -> LayerBreakdown {
    let (m, t, d) = (m as u64, t as u64, d as u64);
    LayerBreakdown {
        queries: m as usize,
        keys: t as usize,
        combine_projection: (2 * m + 2 * t) * d * d,
        combine_similarity: m * t * d,
        combine_merge: m * t * d,
        // inputs, projected queries/keys/values, similarity, merged output
        activation_elements: (t + m) * d + (m + 2 * t) * d + m * t + m * d,
        ..LayerBreakdown::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerBreakdown>,
    /// Encoder FLOPs; equals the sum of the per-layer entries.
    pub total_flops: u64,
    pub dense_flops: u64,
    pub head_flops: u64,
    /// This configuration over the dense baseline.
    pub ratio_vs_dense: f64,
    /// Dense baseline over this configuration.
    pub dense_over_this: f64,
    /// Peak single-example activation footprint.
    pub peak_activation_bytes: u64,
    pub dense_peak_activation_bytes: u64,
    pub memory_ratio: f64,
}

impl CostReport {
    pub fn peak_memory_at_batch(&self, batch: u64) -> u64 {
        self.peak_activation_bytes * batch
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(LayerBreakdown::macs).sum()
    }
}

/// Embedded-token counts under the ideal schedule: `n` at layer 1, then
/// `⌊t·p⌋` per layer, one entry per layer that still sees embedded tokens
/// (through the combining layer, or every layer without one).
pub fn ideal_schedule(config: &ModelConfig, n: usize) -> Result<Vec<usize>> {
    let last = config.placement.unwrap_or(config.n_layers);
    let mut out = Vec::with_capacity(last);
    let mut t = n;
    for l in 1..=last {
        out.push(t);
        if l < last && t > 0 {
            t = preserved_count(t, config.preservation_ratio)?;
        }
    }
    Ok(out)
}

/// Per-layer costs from embedded-token counts for the layers that see them.
fn layers_from_counts(config: &ModelConfig, n: usize, embedded: &[usize]) -> Vec<LayerBreakdown> {
    let d = config.d_model;
    let h = config.heads;
    let m = config.active_combo_tokens();
    let mut out = Vec::with_capacity(config.n_layers);
    for l in 1..=config.n_layers {
        let mut entry = match config.placement {
            Some(p) if l == p => {
                let mut b = combiner_flops(m, embedded[l - 1], d);
                b.kind = Some(LayerKind::Combining);
                b
            }
            Some(p) if l > p => {
                let mut b = layer_flops(m, m, d, h);
                b.kind = Some(LayerKind::Compact);
                b
            }
            _ => {
                let mut b = layer_flops(n + m, embedded[l - 1] + m, d, h);
                b.kind = Some(LayerKind::Pruned);
                b
            }
        };
        entry.layer = l;
        out.push(entry);
    }
    out
}

fn report(config: &ModelConfig, n: usize, layers: Vec<LayerBreakdown>) -> CostReport {
    let dense_layer = layer_flops(n, n, config.d_model, config.heads);
    let dense_flops = dense_layer.flops() * config.n_layers as u64;
    let total_flops: u64 = layers.iter().map(LayerBreakdown::flops).sum();
    let peak = layers.iter().map(|l| l.activation_elements).max().unwrap_or(0);
    let dense_peak = dense_layer.activation_elements;
    CostReport {
        total_flops,
        dense_flops,
        head_flops: (config.d_model * config.num_classes) as u64 * FLOPS_PER_MAC,
        ratio_vs_dense: total_flops as f64 / dense_flops as f64,
        dense_over_this: dense_flops as f64 / total_flops as f64,
        peak_activation_bytes: peak * BYTES_PER_ACTIVATION,
        dense_peak_activation_bytes: dense_peak * BYTES_PER_ACTIVATION,
        memory_ratio: peak as f64 / dense_peak as f64,
        layers,
    }
}

/// Cost at full length `max_seq_len` under the ideal schedule. The dense
/// baseline is the same encoder with no pruning and no combination tokens.
pub fn model_cost(config: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    let n = config.max_seq_len;
    let schedule = ideal_schedule(config, n)?;
    Ok(report(config, n, layers_from_counts(config, n, &schedule)))
}

/// Cost of an observed forward pass, using its recorded token counts.
pub fn cost_for_trace(config: &ModelConfig, trace: &TokenTrace) -> Result<CostReport> {
    config.validate()?;
    if trace.layers.len() != config.n_layers {
        return Err(Error::param(
            "trace",
            format!("{} layers traced for a {}-layer model", trace.layers.len(), config.n_layers),
        ));
    }
    let n = trace.layers[0].embedded_keys;
    let embedded: Vec<usize> = trace.layers.iter().map(|l| l.embedded_keys).collect();
    Ok(report(config, n, layers_from_counts(config, n, &embedded)))
}

/// One row of a cost sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub placement: Option<usize>,
    pub preservation_ratio: f64,
    pub combo_tokens: usize,
    pub report: CostReport,
}

/// Costs for every combination of the given placements and ratios.
pub fn sweep(base: &ModelConfig, placements: &[Option<usize>], ratios: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(placements.len() * ratios.len());
    for &placement in placements {
        for &p in ratios {
            let config = ModelConfig {
                placement,
                preservation_ratio: p,
                ..base.clone()
            };
            rows.push(SweepRow {
                placement,
                preservation_ratio: p,
                combo_tokens: config.combo_tokens,
                report: model_cost(&config)?,
            });
        }
    }
    Ok(rows)
}
