use serde::{Deserialize, Serialize};

use super::{argmax, Model};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: Metrics,
}

/// Single-label classification metrics. A class absent from both
/// predictions and labels contributes an F1 of zero to the macro mean.
pub fn classification_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::param("dataset", "cannot evaluate on zero examples"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::param(
            "predictions",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Data(format!("class {} out of range for {classes} classes", p.max(y))));
        }
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let macro_f1 = (0..classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / classes as f64;
    let correct: usize = tp.iter().sum();
    let (wrong_p, wrong_y): (usize, usize) = (fp.iter().sum(), fn_.iter().sum());
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_f1,
        micro_f1: f1(correct, wrong_p, wrong_y),
    })
}

/// Evaluation-mode loss and metrics over `(token_ids, label)` pairs.
pub fn evaluate(model: &Model, examples: &[(Vec<usize>, usize)]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::param("dataset", "cannot evaluate on zero examples"));
    }
    let classes = model.config().num_classes;
    let mut predictions = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    let mut loss = 0.0;
    for (ids, label) in examples {
        if *label >= classes {
            return Err(Error::Data(format!("label {label} out of range for {classes} classes")));
        }
        let logits = model.forward(ids)?.logits;
        let data = logits.data();
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - data[*label];
        predictions.push(argmax(data));
        labels.push(*label);
    }
    Ok(Evaluation {
        loss: loss / examples.len() as f64,
        metrics: classification_metrics(&predictions, &labels, classes)?,
    })
}
