//! Quantile-anchored fuzzy membership and the protected/candidate split
//! used to shield tokens from ratio-based pruning.
//!
//! Importance rises linearly from 0 at the lower anchor `a` to 1 at the
//! upper anchor `b`; unimportance is its complement. Tokens whose
//! importance clears a small α-cut and whose unimportance does not clear a
//! large one are protected. Everything else is a pruning candidate.

use crate::error::{Error, Result};

/// α for the importance cut.
pub const IMPORTANCE_ALPHA: f64 = 0.01;
/// α for the unimportance cut.
pub const UNIMPORTANCE_ALPHA: f64 = 0.9;

pub const LOWER_QUANTILE: f64 = 0.25;
pub const UPPER_QUANTILE: f64 = 0.75;

/// Lower and upper membership anchors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchors {
    pub low: f64,
    pub high: f64,
}

/// Quantile with linear interpolation between adjacent order statistics
/// (position `(len - 1) * q` in the sorted sample).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::param("scores", "quantile of an empty list"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::param("q", format!("quantile level {q} outside [0, 1]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("scores", "non-finite score"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn quantile_anchors(scores: &[f64]) -> Result<Anchors> {
    if scores.is_empty() {
        return Err(Error::param("scores", "quantile anchors of an empty list"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("scores", "non-finite score"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let low = quantile_sorted(&sorted, LOWER_QUANTILE);
    let high = quantile_sorted(&sorted, UPPER_QUANTILE);
    Ok(Anchors {
        low,
        high: high.max(low),
    })
}

fn check_anchors(a: f64, b: f64) -> Result<()> {
    if a > b {
        return Err(Error::param("anchors", format!("lower anchor {a} exceeds upper anchor {b}")));
    }
    Ok(())
}

/// Degree to which score `s` is important under anchors `a ≤ b`.
///
/// When `a == b` the `s ≥ b` branch wins, so a score sitting exactly on
/// both anchors is fully important.
pub fn importance_membership(s: f64, a: f64, b: f64) -> Result<f64> {
    check_anchors(a, b)?;
    Ok(if s >= b {
        1.0
    } else if s <= a {
        0.0
    } else {
        (s - a) / (b - a)
    })
}

/// Complement of [`importance_membership`]; the pair always sums to 1.
pub fn unimportance_membership(s: f64, a: f64, b: f64) -> Result<f64> {
    Ok(1.0 - importance_membership(s, a, b)?)
}

/// Indices whose membership is at least `alpha`.
pub fn alpha_cut(memberships: &[f64], alpha: f64) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param("alpha", format!("{alpha} outside (0, 1]")));
    }
    Ok(memberships
        .iter()
        .enumerate()
        .filter(|(_, &m)| m >= alpha)
        .map(|(i, _)| i)
        .collect())
}

/// Protected (`I − U`) and candidate (its complement) index sets, as
/// positions into the input slice. Both are sorted and disjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub protected: Vec<usize>,
    pub candidates: Vec<usize>,
}

/// Partition with anchors taken from the scores themselves.
pub fn partition(scores: &[f64], alpha_importance: f64, alpha_unimportance: f64) -> Result<Partition> {
    let anchors = quantile_anchors(scores)?;
    partition_with_anchors(scores, anchors, alpha_importance, alpha_unimportance)
}

pub fn partition_with_anchors(
    scores: &[f64],
    anchors: Anchors,
    alpha_importance: f64,
    alpha_unimportance: f64,
) -> Result<Partition> {
    let (imp, unimp) = memberships(scores, anchors)?;
    split(&imp, &unimp, alpha_importance, alpha_unimportance)
}

fn memberships(scores: &[f64], anchors: Anchors) -> Result<(Vec<f64>, Vec<f64>)> {
    let imp = scores
        .iter()
        .map(|&s| importance_membership(s, anchors.low, anchors.high))
        .collect::<Result<Vec<_>>>()?;
    let unimp = imp.iter().map(|m| 1.0 - m).collect();
    Ok((imp, unimp))
}

fn split(imp: &[f64], unimp: &[f64], alpha_i: f64, alpha_u: f64) -> Result<Partition> {
    let important = alpha_cut(imp, alpha_i)?;
    let unimportant = alpha_cut(unimp, alpha_u)?;
    let mut is_protected = vec![false; imp.len()];
    for &i in &important {
        is_protected[i] = true;
    }
    for &u in &unimportant {
        is_protected[u] = false;
    }
    let (protected, candidates) = (0..imp.len()).partition(|&i| is_protected[i]);
    Ok(Partition {
        protected,
        candidates,
    })
}

/// Per-layer importance bookkeeping for the embedded tokens currently
/// retained as keys. `positions[k]` is the sequence position scored by
/// `scores[k]`; `protected` and `candidates` hold sequence positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceProfile {
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
    pub anchors: Anchors,
    pub importance: Vec<f64>,
    pub unimportance: Vec<f64>,
    pub protected: Vec<usize>,
    pub candidates: Vec<usize>,
}

impl ImportanceProfile {
    /// `pooled` supplies the sample the quantile anchors are drawn from
    /// (for attention: every head's scores); memberships are evaluated on
    /// `scores`. With `fuzzy` off nothing is protected.
    pub fn build(
        positions: Vec<usize>,
        scores: Vec<f64>,
        pooled: &[f64],
        alpha_importance: f64,
        alpha_unimportance: f64,
        fuzzy: bool,
    ) -> Result<Self> {
        if positions.len() != scores.len() {
            return Err(Error::param(
                "scores",
                format!("{} scores for {} positions", scores.len(), positions.len()),
            ));
        }
        let anchors = if pooled.is_empty() {
            Anchors { low: 0.0, high: 0.0 }
        } else {
            quantile_anchors(pooled)?
        };
        let (importance, unimportance) = memberships(&scores, anchors)?;
        let local = if fuzzy {
            split(&importance, &unimportance, alpha_importance, alpha_unimportance)?
        } else {
            Partition {
                protected: Vec::new(),
                candidates: (0..scores.len()).collect(),
            }
        };
        Ok(ImportanceProfile {
            protected: local.protected.iter().map(|&i| positions[i]).collect(),
            candidates: local.candidates.iter().map(|&i| positions[i]).collect(),
            positions,
            scores,
            anchors,
            importance,
            unimportance,
        })
    }
}
