//! Acceptance criteria. Each criterion prints one PASS/FAIL line with its
//! measured values and pinned tolerances; the process exits non-zero if any
//! criterion fails. Pass criterion ids (`AC-3`) as arguments to run a subset.

#![allow(clippy::needless_range_loop)]

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use token_thinner::combiner::{combine, combining_module, hard_assign, CombinerWeights, GumbelMode};
use token_thinner::cost::{cost_for_trace, ideal_schedule, layer_flops, model_cost, CostReport};
use token_thinner::fuzzy::{
    importance_membership, partition, quantile_anchors, unimportance_membership, IMPORTANCE_ALPHA,
    UNIMPORTANCE_ALPHA,
};
use token_thinner::model::{load, save, LayerKind, LayerWeights};
use token_thinner::pruning::{ftp_attention, select_tokens, AttentionBlockWeights, AttentionSettings, TokenSet};
use token_thinner::{AssignMode, LayerBreakdown, Model, ModelConfig, Tape, Tensor};
use token_thinner_cli::run::{run, CHECKPOINT_FILE};
use token_thinner_cli::{DataConfig, RunConfig, TaskKind, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
    notes: Vec<String>,
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC-")).collect();
    let criteria = [
        Criterion {
            id: "AC-1",
            title: "cost model at BERT-base geometry",
            budget: Duration::from_secs(1),
            check: cost_anchors,
        },
        Criterion {
            id: "AC-2",
            title: "oracle equivalence",
            budget: Duration::from_secs(30),
            check: oracle_equivalence,
        },
        Criterion {
            id: "AC-3",
            title: "gradients",
            budget: Duration::from_secs(120),
            check: gradients,
        },
        Criterion {
            id: "AC-4",
            title: "learning on keyword-flag",
            budget: Duration::from_secs(600),
            check: learning,
        },
        Criterion {
            id: "AC-5",
            title: "fuzzy partition properties",
            budget: Duration::from_secs(5),
            check: fuzzy_properties,
        },
        Criterion {
            id: "AC-6",
            title: "token schedule and dense reduction",
            budget: Duration::from_secs(120),
            check: schedule_and_reduction,
        },
        Criterion {
            id: "AC-7",
            title: "checkpoints, reruns and MAC accounting",
            budget: Duration::from_secs(120),
            check: plumbing,
        },
    ];

    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.iter().any(|w| w == c.id)) {
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome {
                pass: false,
                detail: format!("panicked: {msg}"),
                notes: Vec::new(),
            }
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {} {}: {}; {:.2}s of {}s{}",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.title,
            outcome.detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_time { "" } else { " (over budget)" }
        );
        for note in &outcome.notes {
            println!("    {note}");
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// Dense reference arithmetic on row-major matrices.

#[derive(Clone, Debug)]
struct Mat {
    rows: usize,
    cols: usize,
    v: Vec<f64>,
}

impl Mat {
    fn from_tensor(t: &Tensor) -> Mat {
        Mat {
            rows: t.rows(),
            cols: t.cols(),
            v: t.data().to_vec(),
        }
    }

    fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            v: vec![0.0; rows * cols],
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.cols..(i + 1) * self.cols]
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.cols + j]
    }

    fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.v[r * self.cols..(r + 1) * self.cols].copy_from_slice(self.row(i));
        }
        out
    }

    fn cols_slice(&self, start: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for i in 0..self.rows {
            for j in 0..width {
                out.v[i * width + j] = self.at(i, start + j);
            }
        }
        out
    }

    fn max_abs_diff(&self, t: &Tensor) -> f64 {
        assert_eq!(t.shape(), [self.rows, self.cols], "shape mismatch against oracle");
        self.v.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn bits_equal(&self, t: &Tensor) -> bool {
        t.shape() == [self.rows, self.cols] && self.v.iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `a · b`, accumulating each entry over the inner index in order.
fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for p in 0..a.cols {
                acc += a.at(i, p) * b.at(p, j);
            }
            out.v[i * b.cols + j] = acc;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_bias(mut x: Mat, bias: &[f64]) -> Mat {
    for i in 0..x.rows {
        for j in 0..x.cols {
            x.v[i * x.cols + j] += bias[j];
        }
    }
    x
}

fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    add_bias(matmul(x, &Mat::from_tensor(w)), b.data())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    Mat {
        rows: a.rows,
        cols: a.cols,
        v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
    }
}

fn softmax(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn layer_norm(x: &Mat, gain: &Tensor, bias: &Tensor, eps: f64) -> Mat {
    let c = x.cols;
    let mut out = Mat::zeros(x.rows, c);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out.v[r * c + j] = (row[j] - mean) * inv_std * gain.data()[j] + bias.data()[j];
        }
    }
    out
}

fn gelu(x: &Mat) -> Mat {
    // sqrt(2/pi), tanh approximation
    const C: f64 = 0.797_884_560_802_865_4;
    Mat {
        rows: x.rows,
        cols: x.cols,
        v: x.v.iter().map(|&v| 0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh())).collect(),
    }
}

/// Multi-head attention over every key row, with columns outside
/// `allowed` forced to probability zero. Returns the output and, per head,
/// the probability matrix.
fn masked_attention(x: &Mat, w: &AttentionBlockWeights, heads: usize, allowed: &[bool]) -> (Mat, Vec<Mat>) {
    let d = x.cols;
    let hd = d / heads;
    let q = affine(x, &w.query, &w.query_bias);
    let k = affine(x, &w.key, &w.key_bias);
    let v = affine(x, &w.value, &w.value_bias);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut context = Mat::zeros(x.rows, d);
    let mut probs_per_head = Vec::new();
    for h in 0..heads {
        let (qh, kh) = (q.cols_slice(h * hd, hd), k.cols_slice(h * hd, hd));
        let mut probs = Mat::zeros(x.rows, x.rows);
        for i in 0..x.rows {
            let row = &mut probs.v[i * x.rows..(i + 1) * x.rows];
            for j in 0..x.rows {
                row[j] = if allowed[j] {
                    dot(qh.row(i), kh.row(j)) * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            softmax(row);
        }
        for i in 0..x.rows {
            for c in 0..hd {
                let mut acc = 0.0;
                for j in 0..x.rows {
                    acc += probs.at(i, j) * v.at(j, h * hd + c);
                }
                context.v[i * d + h * hd + c] = acc;
            }
        }
        probs_per_head.push(probs);
    }
    (affine(&context, &w.output, &w.output_bias), probs_per_head)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn randomize<F: FnMut(&mut dyn FnMut(String, &mut Tensor))>(rng: &mut ChaCha8Rng, mut visit: F) {
    visit(&mut |name, t| {
        let shape = t.shape().to_vec();
        *t = random_tensor(rng, &shape, 0.6);
        if name.contains("gain") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
    });
}

fn random_subset(rng: &mut ChaCha8Rng, universe: &[usize], keep: f64) -> Vec<usize> {
    universe.iter().copied().filter(|_| rng.random::<f64>() < keep).collect()
}

// ---------------------------------------------------------------------------
// Cost anchors.

fn placement_config(placement: usize) -> ModelConfig {
    ModelConfig {
        max_seq_len: 512,
        d_model: 768,
        heads: 12,
        n_layers: 12,
        preservation_ratio: 0.9,
        combo_tokens: 8,
        placement: Some(placement),
        ..ModelConfig::bert_base()
    }
}

/// Encoder MACs under an alternative per-layer counting rule, over a dense
/// baseline of `dense_tokens` tokens.
fn alternative_ratio(
    report: &CostReport,
    cfg: &ModelConfig,
    layer_macs: impl Fn(&LayerBreakdown) -> u64,
    dense_tokens: usize,
) -> f64 {
    let total: u64 = report.layers.iter().map(layer_macs).sum();
    let dense = layer_flops(dense_tokens, dense_tokens, cfg.d_model, cfg.heads).macs() * cfg.n_layers as u64;
    total as f64 / dense as f64
}

fn conventions(cfg: &ModelConfig) -> Vec<(&'static str, f64)> {
    let r = model_cost(cfg).unwrap();
    let d2 = (cfg.d_model * cfg.d_model) as u64;
    let n = cfg.max_seq_len;
    let pruned = |l: &LayerBreakdown| l.kind == Some(LayerKind::Pruned);
    let dense_layer = layer_flops(n, n, cfg.d_model, cfg.heads);
    vec![
        ("as counted", r.ratio_vs_dense),
        (
            "keys/values projected before gathering",
            alternative_ratio(
                &r,
                cfg,
                |l| {
                    if pruned(l) {
                        l.macs() - l.key_value_projection + 2 * l.queries as u64 * d2
                    } else {
                        l.macs()
                    }
                },
                n,
            ),
        ),
        (
            "no key pruning credit",
            alternative_ratio(
                &r,
                cfg,
                |l| {
                    if pruned(l) {
                        layer_flops(l.queries, l.queries, cfg.d_model, cfg.heads).macs()
                    } else {
                        l.macs()
                    }
                },
                n,
            ),
        ),
        (
            "no key pruning credit, layers before the module at dense cost",
            alternative_ratio(&r, cfg, |l| if pruned(l) { dense_layer.macs() } else { l.macs() }, n),
        ),
        (
            "baseline carrying combination tokens",
            alternative_ratio(&r, cfg, |l| l.macs(), n + cfg.combo_tokens),
        ),
        ("attention sublayers only", {
            let total: u64 = r.layers.iter().map(|l| l.macs() - l.feed_forward).sum();
            total as f64 / ((dense_layer.macs() - dense_layer.feed_forward) * cfg.n_layers as u64) as f64
        }),
    ]
}

fn cost_anchors() -> Outcome {
    const RATIO_TOL: f64 = 0.03;
    const RECIPROCAL_TOL: f64 = 0.05;
    // (placement, FLOPs ratio vs dense, dense-over-this reciprocal)
    let anchors = [(11, 0.877, 1.14), (7, 0.544, 1.84)];
    let hits = |placement_ratios: &[f64]| -> usize {
        anchors
            .iter()
            .zip(placement_ratios)
            .map(|(&(_, ratio, recip), &r)| {
                usize::from((r - ratio).abs() <= RATIO_TOL) + usize::from((1.0 / r - recip).abs() <= RECIPROCAL_TOL)
            })
            .sum()
    };

    let mut parts = Vec::new();
    let mut table: Vec<(&str, Vec<f64>)> = Vec::new();
    let mut memory = Vec::new();
    for &(placement, ratio_target, recip_target) in &anchors {
        let cfg = placement_config(placement);
        let r = model_cost(&cfg).unwrap();
        memory.push(r.memory_ratio);
        parts.push(format!(
            "placement {placement}: ratio {:.4} (target {ratio_target} ± {RATIO_TOL}), reciprocal {:.4} (target {recip_target} ± {RECIPROCAL_TOL})",
            r.ratio_vs_dense, r.dense_over_this,
        ));
        for (i, (name, value)) in conventions(&cfg).into_iter().enumerate() {
            if table.len() <= i {
                table.push((name, Vec::new()));
            }
            table[i].1.push(value);
        }
    }
    let counted_hits = hits(&table[0].1);
    let pass = counted_hits == 4;
    parts.push(format!("{counted_hits}/4 anchors met"));

    let mut notes: Vec<String> = table
        .iter()
        .map(|(name, ratios)| {
            format!(
                "{name}: placement 11 ratio {:.4} (reciprocal {:.4}), placement 7 ratio {:.4} (reciprocal {:.4}); {}/4 anchors",
                ratios[0],
                1.0 / ratios[0],
                ratios[1],
                1.0 / ratios[1],
                hits(ratios)
            )
        })
        .collect();
    notes.push(format!("peak activation memory ratio {:.4} / {:.4}", memory[0], memory[1]));
    if !pass {
        let cfg = placement_config(11);
        let dense = layer_flops(512, 512, cfg.d_model, cfg.heads).macs() as f64;
        let r = model_cost(&cfg).unwrap();
        let module = r.layers[10].macs() as f64 / dense;
        let compact = r.layers[11].macs() as f64 / dense;
        notes.push(format!(
            "the anchors fit ratio ≈ (placement − 0.475) / 12: every layer before the module at full dense cost plus a fixed ~0.5 dense layer for the module and all later layers; here the module costs {module:.3} of a dense layer and each later layer {compact:.4}, so no rule above reaches all four anchors"
        ));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
        notes,
    }
}

// ---------------------------------------------------------------------------
// Oracle equivalence.

fn brute_force_selection(scores: &[f64], positions: &[usize], protected: &[usize], t_next: usize) -> Vec<usize> {
    let k = t_next.max(protected.len());
    let must: Vec<bool> = positions.iter().map(|p| protected.contains(p)).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << positions.len()) {
        if mask.count_ones() as usize != k {
            continue;
        }
        if (0..positions.len()).any(|i| must[i] && mask & (1 << i) == 0) {
            continue;
        }
        let chosen: Vec<usize> = (0..positions.len()).filter(|&i| mask & (1 << i) != 0).collect();
        // Only unprotected picks compete on score.
        let total: f64 = chosen.iter().filter(|&&i| !must[i]).map(|&i| scores[i]).sum();
        let set: Vec<usize> = chosen.iter().map(|&i| positions[i]).collect();
        let better = match &best {
            None => true,
            Some((b, s)) => total > *b || (total == *b && set < *s),
        };
        if better {
            best = Some((total, set));
        }
    }
    best.map(|(_, s)| s).unwrap_or_default()
}

fn oracle_equivalence() -> Outcome {
    const TOL: f64 = 1e-12;
    const INSTANCES: usize = 150;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut attn_err, mut score_err, mut sim_err, mut combine_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut selection_mismatches = 0;
    let mut overflow_cases = 0;

    for _ in 0..INSTANCES {
        let heads = rng.random_range(1..=2);
        let d = heads * rng.random_range(1..=8);
        let n = rng.random_range(1..=12);
        let m = rng.random_range(0..=3);

        // Attention against masked dense attention.
        let all: Vec<usize> = (0..n).collect();
        let mut embedded = random_subset(&mut rng, &all, 0.6);
        if embedded.is_empty() && m == 0 {
            embedded.push(rng.random_range(0..n));
        }
        let kept = TokenSet::new(n, embedded.clone(), m, 1).unwrap();
        let mut w = AttentionBlockWeights::init(d, 4 * d, &mut rng);
        randomize(&mut rng, |f| w.visit_mut("", f));
        let x = random_tensor(&mut rng, &[n + m, d], 1.0);
        let settings = AttentionSettings {
            heads,
            alpha_importance: IMPORTANCE_ALPHA,
            alpha_unimportance: UNIMPORTANCE_ALPHA,
            fuzzy: true,
            attention_residual: true,
            ln_eps: 1e-5,
        };
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (out, profile) = ftp_attention(&mut tape, xv, &bound, &kept, &settings).unwrap();
        let allowed: Vec<bool> = (0..n + m).map(|r| r >= n || embedded.contains(&r)).collect();
        let (expected, probs) = masked_attention(&Mat::from_tensor(&x), &w, heads, &allowed);
        attn_err = attn_err.max(expected.max_abs_diff(tape.value(out)));
        for (k, &pos) in embedded.iter().enumerate() {
            let mut s = 0.0;
            for p in &probs {
                s += (0..n + m).map(|i| p.at(i, pos)).sum::<f64>() / (n + m) as f64;
            }
            score_err = score_err.max((s / heads as f64 - profile.scores[k]).abs());
        }

        // Selection against exhaustive enumeration.
        let positions = {
            let mut p = random_subset(&mut rng, &all, 0.8);
            if p.is_empty() {
                p.push(0);
            }
            p
        };
        let scores: Vec<f64> = positions.iter().map(|_| rng.random_range(0..9) as f64 / 8.0).collect();
        let protected = random_subset(&mut rng, &positions, 0.3);
        let t_next = rng.random_range(1..=positions.len());
        if protected.len() > t_next {
            overflow_cases += 1;
        }
        let current = TokenSet::new(n, positions.clone(), m, 1).unwrap();
        let chosen = select_tokens(&scores, &protected, t_next, &current).unwrap();
        if chosen.embedded() != brute_force_selection(&scores, &positions, &protected, t_next).as_slice() {
            selection_mismatches += 1;
        }

        // Combining against explicit grouping.
        let (t, mc) = (rng.random_range(1..=12), rng.random_range(1..=4));
        let mut cw = CombinerWeights::init(d, &mut rng);
        randomize(&mut rng, |f| cw.visit_mut("", f));
        let e = random_tensor(&mut rng, &[t, d], 1.0);
        let c = random_tensor(&mut rng, &[mc, d], 1.0);
        let mut tape = Tape::new();
        let bound = cw.bind(&mut tape);
        let (ev, cv) = (tape.constant(e.clone()), tape.constant(c.clone()));
        let merged = combining_module(&mut tape, ev, cv, &bound, GumbelMode::Disabled, AssignMode::Hard, 1e-5).unwrap();
        let sim = tape.value(merged.assignment.sim).clone();

        let (em, cm) = (Mat::from_tensor(&e), Mat::from_tensor(&c));
        let ek = matmul(&layer_norm(&em, &cw.embedded_norm_gain, &cw.embedded_norm_bias, 1e-5), &Mat::from_tensor(&cw.key));
        let cq = matmul(&layer_norm(&cm, &cw.combo_norm_gain, &cw.combo_norm_bias, 1e-5), &Mat::from_tensor(&cw.query));
        for j in 0..t {
            let mut col: Vec<f64> = (0..mc).map(|i| dot(ek.row(j), cq.row(i))).collect();
            softmax(&mut col);
            for i in 0..mc {
                sim_err = sim_err.max((col[i] - sim.get2(i, j)).abs());
            }
        }
        // Groups follow the library's similarity so that near-ties cannot
        // flip between the two computations.
        let owner: Vec<usize> = (0..t)
            .map(|j| (0..mc).fold(0, |best, i| if sim.get2(i, j) > sim.get2(best, j) { i } else { best }))
            .collect();
        let wv = Mat::from_tensor(&cw.value);
        let wo = Mat::from_tensor(&cw.output);
        let values = matmul(&em, &wv);
        let tokens = tape.value(merged.tokens);
        for i in 0..mc {
            let group: Vec<usize> = (0..t).filter(|&j| owner[j] == i).collect();
            let expected: Vec<f64> = if group.is_empty() {
                cm.row(i).to_vec()
            } else {
                let mut mean = Mat::zeros(1, d);
                for &j in &group {
                    for k in 0..d {
                        mean.v[k] += values.at(j, k) / group.len() as f64;
                    }
                }
                let update = matmul(&mean, &wo);
                cm.row(i).iter().zip(&update.v).map(|(a, b)| a + b).collect()
            };
            for k in 0..d {
                combine_err = combine_err.max((expected[k] - tokens.get2(i, k)).abs());
            }
        }
    }

    let pass = attn_err <= TOL && score_err <= TOL && sim_err <= TOL && combine_err <= TOL && selection_mismatches == 0;
    Outcome {
        pass,
        detail: format!(
            "{INSTANCES} instances; attention max err {attn_err:.2e}, importance scores {score_err:.2e}, similarity {sim_err:.2e}, combine {combine_err:.2e} (tol {TOL:.0e}); selection mismatches {selection_mismatches} ({overflow_cases} with protected overflow)"
        ),
        notes: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Gradients.

fn gradient_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 8,
        heads: 2,
        max_seq_len: 16,
        combo_tokens: 3,
        placement: Some(3),
        preservation_ratio: 0.7,
        vocab_size: 24,
        num_classes: 3,
        assignment: AssignMode::Soft,
        ..ModelConfig::toy()
    }
}

fn perturb(model: &mut Model, slot: usize, elem: usize, delta: f64) {
    let mut i = 0;
    model.weights.visit_mut(&mut |_, t| {
        if i == slot {
            t.data_mut()[elem] += delta;
        }
        i += 1;
    });
}

fn gradients() -> Outcome {
    const REL_TOL: f64 = 1e-3;
    const ABS_FLOOR: f64 = 1e-9;
    const STEP: f64 = 1e-5;
    const PER_GROUP: usize = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut model = Model::build(gradient_config(), 13).unwrap();
    // Larger weights give gradients well above finite-difference noise.
    randomize(&mut rng, |f| model.weights.visit_mut(&mut |n, t| f(n, t)));
    let ids: Vec<usize> = (0..14).map(|_| rng.random_range(2..24)).collect();
    let label = 1;
    let (_, grads) = model.loss_and_grads(&ids, label).unwrap();
    let reference = model.forward(&ids).unwrap();
    assert!(reference.trace.layers.iter().any(|l| l.embedded_keys < 14), "pruning must be active");

    let mut analytic = Vec::new();
    let mut names = Vec::new();
    grads.visit(&mut |name, t| {
        names.push(name);
        analytic.push(t.data().to_vec());
    });
    let groups = ["embeddings.", "attention.", "combiner.", "head."];
    let mut coords = Vec::new();
    for g in groups {
        let pool: Vec<(usize, usize)> = names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.contains(g))
            .flat_map(|(s, _)| (0..analytic[s].len()).map(move |e| (s, e)))
            .filter(|&(s, e)| analytic[s][e].abs() > 1e-7)
            .collect();
        for _ in 0..PER_GROUP {
            coords.push(pool[rng.random_range(0..pool.len())]);
        }
    }

    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut selection_changes = 0;
    for &(s, e) in &coords {
        perturb(&mut model, s, e, STEP);
        let plus = model.loss(&ids, label).unwrap();
        if model.forward(&ids).unwrap().trace != reference.trace {
            selection_changes += 1;
        }
        perturb(&mut model, s, e, -2.0 * STEP);
        let minus = model.loss(&ids, label).unwrap();
        perturb(&mut model, s, e, STEP);
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[s][e];
        let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(ABS_FLOOR);
        worst = worst.max(rel);
        if rel > REL_TOL {
            failures += 1;
        }
    }

    let (st_exact, st_detail) = straight_through_identity();
    let pass = failures == 0 && selection_changes == 0 && st_exact;
    Outcome {
        pass,
        detail: format!(
            "{} coordinates across embeddings, pruned attention, combiner and head: worst relative err {worst:.2e} (tol {REL_TOL:.0e}), {failures} over tolerance, {selection_changes} perturbations changed the kept set; {st_detail}",
            coords.len()
        ),
        notes: Vec::new(),
    }
}

/// The hard path's gradient with respect to the similarity must equal the
/// gradient the relaxed path takes with respect to its assignment weights
/// when those weights sit at the one-hot point.
fn straight_through_identity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = true;
    for _ in 0..20 {
        let (d, t, m) = (rng.random_range(2..=8), rng.random_range(1..=10), rng.random_range(1..=4));
        let mut cw = CombinerWeights::init(d, &mut rng);
        randomize(&mut rng, |f| cw.visit_mut("", f));
        let e = random_tensor(&mut rng, &[t, d], 1.0);
        let c = random_tensor(&mut rng, &[m, d], 1.0);
        let mut sim = random_tensor(&mut rng, &[m, t], 1.0);
        sim.data_mut().iter_mut().for_each(|v| *v = v.exp());
        let readout = random_tensor(&mut rng, &[m, d], 1.0);

        let mut hard_tape = Tape::new();
        let w = cw.bind_constant(&mut hard_tape);
        let s = hard_tape.leaf(sim.clone());
        let (ev, cv, rv) = (
            hard_tape.constant(e.clone()),
            hard_tape.constant(c.clone()),
            hard_tape.constant(readout.clone()),
        );
        let assignment = hard_assign(&mut hard_tape, s).unwrap();
        let out = combine(&mut hard_tape, assignment.hard, ev, cv, &w).unwrap();
        let weighted = hard_tape.mul(out, rv).unwrap();
        let loss = hard_tape.sum(weighted);
        let hard_grad = hard_tape.backward(loss).unwrap().get(s).cloned().unwrap();
        let hard_value = hard_tape.value(out).clone();

        let mut soft_tape = Tape::new();
        let w = cw.bind_constant(&mut soft_tape);
        let onehot = hard_tape.value(assignment.hard).clone();
        let a = soft_tape.leaf(onehot);
        let (ev, cv, rv) = (soft_tape.constant(e), soft_tape.constant(c), soft_tape.constant(readout));
        let out = combine(&mut soft_tape, a, ev, cv, &w).unwrap();
        let weighted = soft_tape.mul(out, rv).unwrap();
        let loss = soft_tape.sum(weighted);
        let soft_grad = soft_tape.backward(loss).unwrap().get(a).cloned().unwrap();

        exact &= hard_grad == soft_grad && hard_value == *soft_tape.value(out);
    }
    (exact, format!("straight-through identity {}", if exact { "exact on 20 cases" } else { "violated" }))
}

// ---------------------------------------------------------------------------
// Learning.

fn learning_config(model: ModelConfig) -> RunConfig {
    RunConfig {
        seed: 7,
        model,
        data: DataConfig::Synthetic {
            kind: TaskKind::KeywordFlag,
            train_size: 2000,
            test_size: 500,
            seq_len: 48,
        },
        train: TrainConfig {
            epochs: 1,
            batch_size: 16,
            // Training from scratch; the fine-tuning default is far too small.
            learning_rate: 1e-3,
            ..TrainConfig::default()
        },
    }
}

fn learning() -> Outcome {
    const MARGIN: f64 = 0.05;
    const FLOOR: f64 = 0.90;
    let ours = learning_config(ModelConfig::toy());
    let dense = learning_config(ModelConfig::toy().dense_baseline());
    let a = run(&ours, None).unwrap().report;
    let b = run(&dense, None).unwrap().report;
    let (acc_ours, acc_dense) = (a.test.metrics.accuracy, b.test.metrics.accuracy);
    let pass = acc_ours >= acc_dense - MARGIN && acc_ours > FLOOR && acc_dense > FLOOR;
    let keys: Vec<String> = a.token_trace.iter().map(|l| format!("{:.1}", l.mean_keys)).collect();
    Outcome {
        pass,
        detail: format!(
            "pruned+combined test acc {acc_ours:.4} (macro F1 {:.4}, FLOPs ratio {:.4}), dense test acc {acc_dense:.4} (macro F1 {:.4}); need ours ≥ dense − {MARGIN} and both > {FLOOR}",
            a.test.metrics.macro_f1, a.cost.ratio_vs_dense, b.test.metrics.macro_f1
        ),
        notes: vec![format!(
            "mean keys per layer [{}]; wall time ours {:.1}s, dense {:.1}s",
            keys.join(", "),
            a.wall_time_secs,
            b.wall_time_secs
        )],
    }
}

// ---------------------------------------------------------------------------
// Fuzzy properties.

fn random_scores(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=64);
    match rng.random_range(0..4) {
        0 => (0..n).map(|_| rng.random::<f64>()).collect(),
        // heavy right tail, like attention column means
        1 => (0..n).map(|_| rng.random::<f64>().powi(6)).collect(),
        // many ties
        2 => (0..n).map(|_| rng.random_range(0..4) as f64 * 0.25).collect(),
        _ => vec![rng.random::<f64>(); n],
    }
}

fn fuzzy_properties() -> Outcome {
    const VECTORS: usize = 1000;
    const EDGE: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut complement, mut monotone, mut affine, mut degenerate) = (0, 0, 0, 0);
    let mut degenerate_cases = 0;
    for _ in 0..VECTORS {
        let s = random_scores(&mut rng);
        let anchors = quantile_anchors(&s).unwrap();
        let (a, b) = (anchors.low, anchors.high);
        let imp: Vec<f64> = s.iter().map(|&v| importance_membership(v, a, b).unwrap()).collect();
        let unimp: Vec<f64> = s.iter().map(|&v| unimportance_membership(v, a, b).unwrap()).collect();
        if imp.iter().zip(&unimp).any(|(i, u)| (i + u - 1.0).abs() > 1e-15) {
            complement += 1;
        }
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&x, &y| s[x].total_cmp(&s[y]));
        if order.windows(2).any(|w| imp[w[0]] > imp[w[1]]) {
            monotone += 1;
        }

        let p = partition(&s, IMPORTANCE_ALPHA, UNIMPORTANCE_ALPHA).unwrap();
        let scale = rng.random_range(0.01..100.0);
        let shift = rng.random_range(-10.0..10.0);
        let moved: Vec<f64> = s.iter().map(|v| scale * v + shift).collect();
        let q = partition(&moved, IMPORTANCE_ALPHA, UNIMPORTANCE_ALPHA).unwrap();
        let spread = (b - a).max(1e-300);
        for i in 0..s.len() {
            let near_cut = (imp[i] - IMPORTANCE_ALPHA).abs() < EDGE || (unimp[i] - UNIMPORTANCE_ALPHA).abs() < EDGE;
            let near_anchor = ((s[i] - a) / spread).abs() < EDGE || ((s[i] - b) / spread).abs() < EDGE;
            if !near_cut && !near_anchor && p.protected.contains(&i) != q.protected.contains(&i) {
                affine += 1;
                break;
            }
        }

        if a == b {
            degenerate_cases += 1;
            let expected: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= b).collect();
            let constant = s.iter().all(|&v| v == s[0]);
            if p.protected != expected || (constant && p.protected.len() != s.len()) {
                degenerate += 1;
            }
            if constant {
                // Nothing may be pruned: protection overrides any budget.
                let current = TokenSet::full(s.len(), 0, 1);
                let next = select_tokens(&s, &p.protected, 1, &current).unwrap();
                if next.embedded_count() != s.len() {
                    degenerate += 1;
                }
            }
        }
    }
    let pass = complement + monotone + affine + degenerate == 0 && degenerate_cases > 0;
    Outcome {
        pass,
        detail: format!(
            "{VECTORS} vectors; violations: complementarity {complement}, monotonicity {monotone}, affine invariance {affine}, degenerate anchors {degenerate} ({degenerate_cases} degenerate cases)"
        ),
        notes: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Schedule and dense reduction.

fn dense_oracle_logits(model: &Model, ids: &[usize]) -> Mat {
    let cfg = model.config();
    let w = &model.weights;
    let tok = Mat::from_tensor(&w.token_embedding);
    let pos = Mat::from_tensor(&w.position_embedding);
    let real: Vec<(usize, usize)> = ids
        .iter()
        .take(cfg.max_seq_len)
        .enumerate()
        .filter(|(_, &id)| id != token_thinner::model::PAD_ID)
        .map(|(p, &id)| (p, id))
        .collect();
    let mut x = add(
        &tok.select_rows(&real.iter().map(|r| r.1).collect::<Vec<_>>()),
        &pos.select_rows(&real.iter().map(|r| r.0).collect::<Vec<_>>()),
    );
    for layer in &w.layers {
        let LayerWeights::Attention(b) = layer else {
            panic!("dense model has a combining layer")
        };
        let (attn, _) = masked_attention(&x, b, cfg.heads, &vec![true; x.rows]);
        let hidden = layer_norm(&add(&x, &attn), &b.attn_norm_gain, &b.attn_norm_bias, cfg.ln_eps);
        let ff = affine(&gelu(&affine(&hidden, &b.ff_in, &b.ff_in_bias)), &b.ff_out, &b.ff_out_bias);
        x = layer_norm(&add(&ff, &hidden), &b.ff_norm_gain, &b.ff_norm_bias, cfg.ln_eps);
    }
    let mut pooled = Mat::zeros(1, x.cols);
    for r in 0..x.rows {
        for j in 0..x.cols {
            pooled.v[j] += x.at(r, j);
        }
    }
    let inv = 1.0 / x.rows as f64;
    pooled.v.iter_mut().for_each(|v| *v *= inv);
    affine(&pooled, &w.head, &w.head_bias)
}

fn schedule_and_reduction() -> Outcome {
    // Ideal run: full-length input, no protection, so every layer keeps
    // exactly floor(0.9 t) keys.
    let cfg = ModelConfig {
        n_layers: 12,
        d_model: 16,
        heads: 2,
        max_seq_len: 512,
        preservation_ratio: 0.9,
        placement: None,
        fuzzy: false,
        vocab_size: 100,
        ..ModelConfig::toy()
    };
    let model = Model::build(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids: Vec<usize> = (0..512).map(|_| rng.random_range(2..100)).collect();
    let chain = model.forward(&ids).unwrap().trace.embedded_chain();
    let mut expected = vec![512usize];
    while expected.len() < 12 {
        let t = *expected.last().unwrap();
        expected.push(t * 9 / 10);
    }
    let chain_ok = chain == expected && ideal_schedule(&cfg, 512).unwrap() == expected;

    // Combining at the last layer sees the end of the same chain.
    let combined_cfg = ModelConfig {
        placement: Some(12),
        ..cfg.clone()
    };
    let combined = Model::build(combined_cfg, 3).unwrap().forward(&ids).unwrap().trace;
    let combined_ok = combined.embedded_chain() == expected && combined.layers[11].kind == LayerKind::Combining;

    let mut mismatches = 0;
    let mut checked = 0;
    for (heads, seed) in [(1, 1), (2, 2), (4, 3)] {
        let dense_cfg = ModelConfig {
            n_layers: 3,
            d_model: 16,
            heads,
            max_seq_len: 40,
            vocab_size: 60,
            num_classes: 3,
            ..ModelConfig::toy().dense_baseline()
        };
        let model = Model::build(dense_cfg, seed).unwrap();
        for _ in 0..10 {
            let len = rng.random_range(1..=40);
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..60)).collect();
            if ids.iter().all(|&i| i == token_thinner::model::PAD_ID) {
                continue;
            }
            checked += 1;
            let logits = model.forward(&ids).unwrap().logits;
            if !dense_oracle_logits(&model, &ids).bits_equal(&logits) {
                mismatches += 1;
            }
        }
    }
    let pass = chain_ok && combined_ok && mismatches == 0;
    Outcome {
        pass,
        detail: format!(
            "trace {:?} (expected {:?}){}; dense reduction bit-identical on {}/{checked} random inputs",
            chain,
            expected,
            if combined_ok { "" } else { "; combining-layer trace differs" },
            checked - mismatches
        ),
        notes: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Plumbing.

fn small_run_config() -> RunConfig {
    RunConfig {
        seed: 19,
        model: ModelConfig {
            n_layers: 3,
            d_model: 16,
            heads: 2,
            max_seq_len: 24,
            combo_tokens: 4,
            placement: Some(2),
            vocab_size: 256,
            ..ModelConfig::toy()
        },
        data: DataConfig::Synthetic {
            kind: TaskKind::MajorityClass,
            train_size: 120,
            test_size: 40,
            seq_len: 20,
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        },
    }
}

fn weight_bits(model: &Model) -> Vec<u64> {
    let mut out = Vec::new();
    model.weights.visit(&mut |_, t| out.extend(t.data().iter().map(|v| v.to_bits())));
    out
}

fn plumbing() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config();
    let first = run(&cfg, Some(&dir.path().join("a"))).unwrap();
    let second = run(&cfg, Some(&dir.path().join("b"))).unwrap();
    let reports_equal = first.report.without_timing() == second.report.without_timing();
    let bytes_a = std::fs::read(dir.path().join("a").join(CHECKPOINT_FILE)).unwrap();
    let bytes_b = std::fs::read(dir.path().join("b").join(CHECKPOINT_FILE)).unwrap();

    let restored = load(dir.path().join("a").join(CHECKPOINT_FILE)).unwrap();
    let resaved = dir.path().join("resaved.ttc");
    save(&restored, &resaved).unwrap();
    let round_trip = weight_bits(&restored) == weight_bits(&first.model)
        && restored.config() == first.model.config()
        && std::fs::read(&resaved).unwrap() == bytes_a;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mac_cases = 0;
    let mut mac_mismatches = 0;
    for placement in [None, Some(1), Some(2), Some(3)] {
        for fuzzy in [true, false] {
            let tiny = ModelConfig {
                n_layers: 3,
                d_model: 8,
                heads: 2,
                max_seq_len: 16,
                combo_tokens: 3,
                placement,
                fuzzy,
                preservation_ratio: 0.75,
                vocab_size: 40,
                ..ModelConfig::toy()
            };
            let model = Model::build(tiny.clone(), 6).unwrap();
            for len in [1, 5, 16] {
                let ids: Vec<usize> = (0..len).map(|_| rng.random_range(2..40)).collect();
                let out = model.forward(&ids).unwrap();
                mac_cases += 1;
                if cost_for_trace(&tiny, &out.trace).unwrap().total_macs() != out.trace.encoder_macs {
                    mac_mismatches += 1;
                }
                // A full-length input without protection follows the ideal schedule.
                if len == 16 && !fuzzy && model_cost(&tiny).unwrap().total_macs() != out.trace.encoder_macs {
                    mac_mismatches += 1;
                }
            }
        }
    }

    let pass = reports_equal && bytes_a == bytes_b && round_trip && mac_mismatches == 0;
    Outcome {
        pass,
        detail: format!(
            "checkpoint round trip {}; rerun reports {}, checkpoints {}; MAC counts match the cost model in {}/{mac_cases} forward passes",
            if round_trip { "bit-exact" } else { "differs" },
            if reports_equal { "identical" } else { "differ" },
            if bytes_a == bytes_b { "identical" } else { "differ" },
            mac_cases - mac_mismatches.min(mac_cases)
        ),
        notes: Vec::new(),
    }
}
