//! Token combining: each embedded token is assigned to one combination
//! token by a Gumbel-perturbed similarity, and every combination token
//! absorbs the mean value projection of its assignees.
//!
//! The assignment is one-hot in the forward pass and behaves like the soft
//! similarity in the backward pass (`onehot + sim − stopgrad(sim)`).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{gumbel, ones, truncated_normal, zeros};
use crate::params::param_group;
use crate::tensor::{Tape, Tensor, Var};

param_group! {
    /// Square `d×d` projections without bias, plus the layer norms applied
    /// to both similarity operands.
    CombinerWeights {
        query,
        key,
        value,
        output,
        combo_norm_gain, combo_norm_bias,
        embedded_norm_gain, embedded_norm_bias,
    }
}

impl CombinerWeights<Tensor> {
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        CombinerWeights {
            query: truncated_normal(&[d, d], rng),
            key: truncated_normal(&[d, d], rng),
            value: truncated_normal(&[d, d], rng),
            output: truncated_normal(&[d, d], rng),
            combo_norm_gain: ones(&[d]),
            combo_norm_bias: zeros(&[d]),
            embedded_norm_gain: ones(&[d]),
            embedded_norm_bias: zeros(&[d]),
        }
    }
}

/// How Gumbel noise is indexed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScope {
    /// One sample per combination token, shared by every embedded token.
    #[default]
    PerCombination,
    /// An independent sample for every (combination, embedded) pair.
    PerPair,
}

pub enum GumbelMode<'a> {
    Disabled,
    Sampled { rng: &'a mut ChaCha8Rng, scope: NoiseScope },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignMode {
    /// Straight-through one-hot assignment.
    #[default]
    Hard,
    /// Use the similarity itself as the assignment weights.
    Soft,
}

/// Similarity and the assignment derived from it, both `m × n_kept`.
#[derive(Clone, Copy, Debug)]
pub struct AssignmentMatrix {
    pub sim: Var,
    pub hard: Var,
}

/// Column-stochastic similarity between combination tokens (rows) and
/// embedded tokens (columns): softmax over combination tokens of
/// `(W_q LN(c_i)) · (W_k LN(e_j)) + g`.
pub fn similarity(
    tape: &mut Tape,
    combo: Var,
    embedded: Var,
    w: &CombinerWeights<Var>,
    noise: GumbelMode<'_>,
    ln_eps: f64,
) -> Result<Var> {
    let (m, _) = tape.value(combo).expect_matrix("similarity")?;
    let (n, _) = tape.value(embedded).expect_matrix("similarity")?;
    if m == 0 {
        return Err(Error::param("combo_tokens", "at least one combination token is required"));
    }
    let c = tape.layer_norm(combo, w.combo_norm_gain, w.combo_norm_bias, ln_eps)?;
    let c = tape.matmul(c, w.query)?;
    let e = tape.layer_norm(embedded, w.embedded_norm_gain, w.embedded_norm_bias, ln_eps)?;
    let e = tape.matmul(e, w.key)?;
    // Rows are embedded tokens, so the softmax runs over combination tokens.
    let logits = tape.matmul_nt(e, c)?;
    let logits = match noise {
        GumbelMode::Disabled => logits,
        GumbelMode::Sampled { rng, scope } => match scope {
            NoiseScope::PerCombination => {
                let g = (0..m).map(|_| gumbel(rng)).collect();
                let g = tape.constant(Tensor::vector(g));
                tape.add_row(logits, g)?
            }
            NoiseScope::PerPair => {
                let g = (0..n * m).map(|_| gumbel(rng)).collect();
                let g = tape.constant(Tensor::new(vec![n, m], g)?);
                tape.add(logits, g)?
            }
        },
    };
    let probs = tape.softmax_rows(logits)?;
    tape.transpose(probs)
}

/// One-hot over each column's argmax (lowest index wins ties).
pub fn argmax_columns(sim: &Tensor) -> Result<Tensor> {
    let (m, n) = sim.expect_matrix("hard_assign")?;
    let mut onehot = Tensor::zeros(&[m, n]);
    for j in 0..n {
        let mut best = 0;
        for i in 1..m {
            if sim.get2(i, j) > sim.get2(best, j) {
                best = i;
            }
        }
        if m > 0 {
            onehot.data_mut()[best * n + j] = 1.0;
        }
    }
    Ok(onehot)
}

/// Straight-through hard assignment.
pub fn hard_assign(tape: &mut Tape, sim: Var) -> Result<AssignmentMatrix> {
    let onehot = argmax_columns(tape.value(sim))?;
    let onehot = tape.constant(onehot);
    let frozen = tape.stop_gradient(sim);
    // (sim - sg(sim)) is exactly zero, so the forward value is exactly one-hot.
    let zero = tape.sub(sim, frozen)?;
    let hard = tape.add(zero, onehot)?;
    Ok(AssignmentMatrix { sim, hard })
}

fn soft_assign(sim: Var) -> AssignmentMatrix {
    AssignmentMatrix { sim, hard: sim }
}

/// `c_i + W_o · (Σ_j A_ij W_v e_j) / (Σ_j A_ij)`; combination tokens with
/// no assignees keep their input value.
pub fn combine(
    tape: &mut Tape,
    assignment: Var,
    embedded: Var,
    combo: Var,
    w: &CombinerWeights<Var>,
) -> Result<Var> {
    let (m, n) = tape.value(assignment).expect_matrix("combine")?;
    let (ne, _) = tape.value(embedded).expect_matrix("combine")?;
    let (mc, _) = tape.value(combo).expect_matrix("combine")?;
    if ne != n || mc != m {
        return Err(Error::Dimension(format!(
            "combine: assignment {m}x{n} with {ne} embedded and {mc} combination rows"
        )));
    }
    let values = tape.matmul(embedded, w.value)?;
    let numerator = tape.matmul(assignment, values)?;
    let counts = tape.row_sums(assignment)?;
    let mean = tape.div_rows(numerator, counts)?;
    let update = tape.matmul(mean, w.output)?;
    tape.add(combo, update)
}

/// Output of the combining module.
#[derive(Clone, Copy, Debug)]
pub struct Combined {
    pub tokens: Var,
    pub assignment: AssignmentMatrix,
}

/// Merges the retained embedded tokens into the `m` combination tokens.
pub fn combining_module(
    tape: &mut Tape,
    embedded: Var,
    combo: Var,
    w: &CombinerWeights<Var>,
    noise: GumbelMode<'_>,
    mode: AssignMode,
    ln_eps: f64,
) -> Result<Combined> {
    let sim = similarity(tape, combo, embedded, w, noise, ln_eps)?;
    let assignment = match mode {
        AssignMode::Hard => hard_assign(tape, sim)?,
        AssignMode::Soft => soft_assign(sim),
    };
    let tokens = combine(tape, assignment.hard, embedded, combo, w)?;
    Ok(Combined { tokens, assignment })
}
