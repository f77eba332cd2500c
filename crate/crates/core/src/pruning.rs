//! Multi-head self-attention whose key/value rows shrink layer by layer.
//!
//! Queries always cover every token. Keys and values are drawn from a
//! [`TokenSet`]: the embedded positions that survived pruning plus all
//! combination tokens, which are never pruned. Each layer also reports an
//! [`ImportanceProfile`] over its embedded keys; the caller feeds it to
//! [`select_tokens`] to pick the next layer's key set.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fuzzy::ImportanceProfile;
use crate::params::param_group;
use crate::tensor::{Tape, Tensor, Var};

/// Key/value membership for one layer.
///
/// Rows `0..seq_len` of the layer input are embedded tokens and rows
/// `seq_len..seq_len + combo_count` are combination tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSet {
    seq_len: usize,
    embedded: Vec<usize>,
    combo_count: usize,
    layer: usize,
}

impl TokenSet {
    pub fn full(seq_len: usize, combo_count: usize, layer: usize) -> Self {
        TokenSet {
            seq_len,
            embedded: (0..seq_len).collect(),
            combo_count,
            layer,
        }
    }

    pub fn new(seq_len: usize, embedded: Vec<usize>, combo_count: usize, layer: usize) -> Result<Self> {
        for (k, &i) in embedded.iter().enumerate() {
            if i >= seq_len {
                return Err(Error::Index(format!("token position {i} out of range for length {seq_len}")));
            }
            if k > 0 && embedded[k - 1] >= i {
                return Err(Error::Index(format!(
                    "token positions must be strictly increasing, found {} before {i}",
                    embedded[k - 1]
                )));
            }
        }
        Ok(TokenSet {
            seq_len,
            embedded,
            combo_count,
            layer,
        })
    }

    pub fn embedded(&self) -> &[usize] {
        &self.embedded
    }

    pub fn embedded_count(&self) -> usize {
        self.embedded.len()
    }

    pub fn combo_count(&self) -> usize {
        self.combo_count
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Total rows of the layer input (all embedded plus combination tokens).
    pub fn query_count(&self) -> usize {
        self.seq_len + self.combo_count
    }

    pub fn key_count(&self) -> usize {
        self.embedded.len() + self.combo_count
    }

    /// Input rows used as keys/values: retained embedded rows, then every
    /// combination row.
    pub fn key_rows(&self) -> Vec<usize> {
        let mut rows = self.embedded.clone();
        rows.extend(self.seq_len..self.seq_len + self.combo_count);
        rows
    }
}

param_group! {
    /// Weights of one token-pruned attention block. Projections are
    /// `d×d` (heads are contiguous column slices); the feed-forward is
    /// `d×f` then `f×d`.
    AttentionBlockWeights {
        query, query_bias,
        key, key_bias,
        value, value_bias,
        output, output_bias,
        ff_in, ff_in_bias,
        ff_out, ff_out_bias,
        attn_norm_gain, attn_norm_bias,
        ff_norm_gain, ff_norm_bias,
    }
}

impl AttentionBlockWeights<Tensor> {
    pub fn init(d: usize, ff_width: usize, rng: &mut ChaCha8Rng) -> Self {
        use crate::init::{ones, truncated_normal, zeros};
        AttentionBlockWeights {
            query: truncated_normal(&[d, d], rng),
            query_bias: zeros(&[d]),
            key: truncated_normal(&[d, d], rng),
            key_bias: zeros(&[d]),
            value: truncated_normal(&[d, d], rng),
            value_bias: zeros(&[d]),
            output: truncated_normal(&[d, d], rng),
            output_bias: zeros(&[d]),
            ff_in: truncated_normal(&[d, ff_width], rng),
            ff_in_bias: zeros(&[ff_width]),
            ff_out: truncated_normal(&[ff_width, d], rng),
            ff_out_bias: zeros(&[d]),
            attn_norm_gain: ones(&[d]),
            attn_norm_bias: zeros(&[d]),
            ff_norm_gain: ones(&[d]),
            ff_norm_bias: zeros(&[d]),
        }
    }

    pub fn width(&self) -> usize {
        self.query.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSettings {
    pub heads: usize,
    pub alpha_importance: f64,
    pub alpha_unimportance: f64,
    /// Protect `I − U` tokens from pruning; off gives plain top-k.
    pub fuzzy: bool,
    /// Residual + layer norm around the attention sublayer.
    pub attention_residual: bool,
    pub ln_eps: f64,
}

/// Inverted dropout applied in training mode when the rate is positive.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub(crate) fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }
}

/// `softmax(q kᵀ / √scale_dim)` over the key axis.
pub fn attention_probs(tape: &mut Tape, q: Var, k: Var, scale_dim: usize) -> Result<Var> {
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (scale_dim as f64).sqrt());
    tape.softmax_rows(logits)
}

/// Column means of each head's probability matrix over the first
/// `embedded_cols` key columns. Returns one score vector per head.
pub fn head_scores(probs_per_head: &[&Tensor], embedded_cols: usize) -> Result<Vec<Vec<f64>>> {
    let first = probs_per_head
        .first()
        .ok_or_else(|| Error::param("probs_per_head", "no heads"))?;
    let shape = first.shape().to_vec();
    let (rows, cols) = first.expect_matrix("importance_scores")?;
    if embedded_cols > cols {
        return Err(Error::Dimension(format!(
            "{embedded_cols} embedded key columns requested from {cols}"
        )));
    }
    probs_per_head
        .iter()
        .map(|p| {
            if p.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "head probability shapes {:?} and {:?} differ",
                    shape,
                    p.shape()
                )));
            }
            let mut sums = vec![0.0; embedded_cols];
            for r in 0..rows {
                let row = p.row(r);
                for (s, v) in sums.iter_mut().zip(&row[..embedded_cols]) {
                    *s += v;
                }
            }
            let inv = 1.0 / rows as f64;
            Ok(sums.into_iter().map(|s| s * inv).collect())
        })
        .collect()
}

/// Per-token importance: the column mean over queries, averaged over heads.
pub fn importance_scores(probs_per_head: &[&Tensor], embedded_cols: usize) -> Result<Vec<f64>> {
    let per_head = head_scores(probs_per_head, embedded_cols)?;
    Ok(mean_over_heads(&per_head, embedded_cols))
}

fn mean_over_heads(per_head: &[Vec<f64>], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for scores in per_head {
        for (o, s) in out.iter_mut().zip(scores) {
            *o += s;
        }
    }
    let inv = 1.0 / per_head.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Keys retained after one pruning step: `⌊t·p⌋`, never below 1.
pub fn preserved_count(t: usize, p: f64) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::param("preservation_ratio", format!("{p} outside (0, 1]")));
    }
    if t == 0 {
        return Err(Error::param("t", "token count must be at least 1"));
    }
    // The tolerance keeps exact products such as 100 * 0.7 from flooring
    // one below the integer.
    let kept = (t as f64 * p + 1e-9).floor() as usize;
    Ok(kept.clamp(1, t))
}

/// Chooses the next layer's embedded keys: every protected position, then
/// the highest-scoring candidates until `t_next` is reached. Ties go to the
/// lower position. If protection alone exceeds `t_next` the budget is
/// exceeded rather than dropping a protected token.
///
/// `scores[k]` belongs to `current.embedded()[k]`; `protected` holds
/// sequence positions.
pub fn select_tokens(scores: &[f64], protected: &[usize], t_next: usize, current: &TokenSet) -> Result<TokenSet> {
    let positions = current.embedded();
    if scores.len() != positions.len() {
        return Err(Error::param(
            "scores",
            format!("{} scores for {} retained tokens", scores.len(), positions.len()),
        ));
    }
    if t_next > positions.len() {
        return Err(Error::param(
            "t_next",
            format!("{t_next} exceeds the {} retained tokens", positions.len()),
        ));
    }
    let mut keep = vec![false; positions.len()];
    for &p in protected {
        let k = positions
            .binary_search(&p)
            .map_err(|_| Error::param("protected", format!("position {p} is not currently retained")))?;
        keep[k] = true;
    }
    let budget = t_next.saturating_sub(protected.len());
    let mut candidates: Vec<usize> = (0..positions.len()).filter(|&k| !keep[k]).collect();
    candidates.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
    for &k in candidates.iter().take(budget) {
        keep[k] = true;
    }
    let embedded = positions
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&p, _)| p)
        .collect();
    TokenSet::new(current.seq_len, embedded, current.combo_count, current.layer + 1)
}

/// Multi-head attention with keys/values restricted to `kept`.
///
/// `x` holds every embedded row followed by every combination row. Keys
/// and values are projected from the gathered rows only. The returned
/// profile scores this layer's embedded keys for the next layer's
/// selection.
pub fn ftp_attention(
    tape: &mut Tape,
    x: Var,
    w: &AttentionBlockWeights<Var>,
    kept: &TokenSet,
    settings: &AttentionSettings,
) -> Result<(Var, ImportanceProfile)> {
    let (rows, d) = tape.value(x).expect_matrix("ftp_attention")?;
    if rows != kept.query_count() {
        return Err(Error::Index(format!(
            "token set describes {} rows but input has {rows}",
            kept.query_count()
        )));
    }
    let heads = settings.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::param("heads", format!("{heads} heads do not divide width {d}")));
    }
    let head_dim = d / heads;

    let q = tape.linear(x, w.query, Some(w.query_bias))?;
    let kv_in = tape.gather_rows(x, &kept.key_rows())?;
    let k = tape.linear(kv_in, w.key, Some(w.key_bias))?;
    let v = tape.linear(kv_in, w.value, Some(w.value_bias))?;

    let embedded_cols = kept.embedded_count();
    let mut contexts = Vec::with_capacity(heads);
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let probs = attention_probs(tape, qh, kh, head_dim)?;
        per_head.extend(head_scores(&[tape.value(probs)], embedded_cols)?);
        contexts.push(tape.matmul(probs, vh)?);
    }
    let context = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)?
    };
    let out = tape.linear(context, w.output, Some(w.output_bias))?;

    let scores = mean_over_heads(&per_head, embedded_cols);
    let pooled: Vec<f64> = per_head.concat();
    let profile = ImportanceProfile::build(
        kept.embedded().to_vec(),
        scores,
        &pooled,
        settings.alpha_importance,
        settings.alpha_unimportance,
        settings.fuzzy,
    )?;
    Ok((out, profile))
}

/// Attention sublayer followed by the feed-forward sublayer, each closed
/// by a residual connection and post-layer-norm. With
/// `attention_residual` off the attention output feeds the feed-forward
/// directly.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    w: &AttentionBlockWeights<Var>,
    kept: &TokenSet,
    settings: &AttentionSettings,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<(Var, ImportanceProfile)> {
    let (attn, profile) = ftp_attention(tape, x, w, kept, settings)?;
    let attn = match dropout.as_deref_mut() {
        Some(dr) => dr.apply(tape, attn)?,
        None => attn,
    };
    let hidden = if settings.attention_residual {
        let sum = tape.add(x, attn)?;
        tape.layer_norm(sum, w.attn_norm_gain, w.attn_norm_bias, settings.ln_eps)?
    } else {
        attn
    };
    let ff = tape.linear(hidden, w.ff_in, Some(w.ff_in_bias))?;
    let ff = tape.gelu(ff);
    let ff = tape.linear(ff, w.ff_out, Some(w.ff_out_bias))?;
    let ff = match dropout {
        Some(dr) => dr.apply(tape, ff)?,
        None => ff,
    };
    let sum = tape.add(ff, hidden)?;
    let out = tape.layer_norm(sum, w.ff_norm_gain, w.ff_norm_bias, settings.ln_eps)?;
    Ok((out, profile))
}
