use serde::{Deserialize, Serialize};

use crate::combiner::{AssignMode, NoiseScope};
use crate::error::{Error, Result};
use crate::fuzzy::{IMPORTANCE_ALPHA, UNIMPORTANCE_ALPHA};

/// Feed-forward width as a multiple of the model width.
pub const FF_MULTIPLIER: usize = 4;

/// Reserved token ids.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Longest accepted sequence; longer inputs are truncated.
    pub max_seq_len: usize,
    pub combo_tokens: usize,
    pub preservation_ratio: f64,
    /// 1-based layer replaced by the combining module; `None` disables it.
    /// Written as `0` in config files.
    #[serde(with = "placement_field")]
    pub placement: Option<usize>,
    pub alpha_importance: f64,
    pub alpha_unimportance: f64,
    /// Shield the fuzzy-protected set from pruning.
    pub fuzzy: bool,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Gumbel noise on the combining similarity during training.
    pub gumbel: bool,
    pub gumbel_scope: NoiseScope,
    pub assignment: AssignMode,
    pub attention_residual: bool,
    /// Applied only in training mode and only when positive.
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// Small CPU-trainable configuration.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            heads: 4,
            max_seq_len: 128,
            combo_tokens: 8,
            preservation_ratio: 0.9,
            placement: Some(3),
            alpha_importance: IMPORTANCE_ALPHA,
            alpha_unimportance: UNIMPORTANCE_ALPHA,
            fuzzy: true,
            vocab_size: 2000,
            num_classes: 2,
            gumbel: true,
            gumbel_scope: NoiseScope::PerCombination,
            assignment: AssignMode::Hard,
            attention_residual: true,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    /// BERT-base geometry with the combining module at layer 11.
    pub fn bert_base() -> Self {
        ModelConfig {
            n_layers: 12,
            d_model: 768,
            heads: 12,
            max_seq_len: 512,
            placement: Some(11),
            vocab_size: 30522,
            ..ModelConfig::toy()
        }
    }

    /// Same geometry with pruning and combining disabled.
    pub fn dense_baseline(&self) -> Self {
        ModelConfig {
            preservation_ratio: 1.0,
            placement: None,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Combination tokens carried through the encoder; none without a
    /// combining module.
    pub fn active_combo_tokens(&self) -> usize {
        if self.placement.is_some() {
            self.combo_tokens
        } else {
            0
        }
    }

    pub fn ff_width(&self) -> usize {
        self.d_model * FF_MULTIPLIER
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::param("n_layers", "must be at least 1"));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::param(
                "heads",
                format!("{} heads must divide width {}", self.heads, self.d_model),
            ));
        }
        if self.max_seq_len == 0 {
            return Err(Error::param("max_seq_len", "must be at least 1"));
        }
        if self.combo_tokens == 0 {
            return Err(Error::param("combo_tokens", "must be at least 1"));
        }
        if !(self.preservation_ratio > 0.0 && self.preservation_ratio <= 1.0) {
            return Err(Error::param(
                "preservation_ratio",
                format!("{} outside (0, 1]", self.preservation_ratio),
            ));
        }
        if let Some(p) = self.placement {
            if p == 0 || p > self.n_layers {
                return Err(Error::param(
                    "placement",
                    format!("layer {p} outside 1..={}", self.n_layers),
                ));
            }
        }
        for (name, a) in [
            ("alpha_importance", self.alpha_importance),
            ("alpha_unimportance", self.alpha_unimportance),
        ] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::param(name, format!("{a} outside (0, 1]")));
            }
        }
        if self.vocab_size <= UNK_ID {
            return Err(Error::param("vocab_size", "must include the pad and unknown ids"));
        }
        if self.num_classes == 0 {
            return Err(Error::param("num_classes", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::param("ln_eps", "must be positive"));
        }
        Ok(())
    }
}

mod placement_field {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(value.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let layer = usize::deserialize(d)?;
        Ok((layer != 0).then_some(layer))
    }
}
