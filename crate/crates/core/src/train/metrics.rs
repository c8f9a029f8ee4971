use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// `exp(mean token cross-entropy)`.
pub fn perplexity(mean_loss: f64) -> f64 {
    mean_loss.exp()
}

/// Percentage of non-ignored rows of `logits [N, V]` whose argmax is the target.
pub fn token_accuracy<F: Float>(logits: &Tensor<F>, targets: &[i64], ignore: i64) -> Result<f64> {
    let (hits, count) = token_hits(logits, targets, ignore)?;
    if count == 0 {
        return Err(Error::AllIgnored);
    }
    Ok(100.0 * hits as f64 / count as f64)
}

/// `(correct, counted)` argmax predictions, for accumulating over batches.
pub fn token_hits<F: Float>(logits: &Tensor<F>, targets: &[i64], ignore: i64) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::shape("token_accuracy", s, &[targets.len()]));
    }
    let v = s[1];
    let mut hits = 0;
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        count += 1;
        let row = &logits.data()[i * v..(i + 1) * v];
        if crate::model::seq2seq::argmax(row) as i64 == t {
            hits += 1;
        }
    }
    Ok((hits, count))
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Per-example scores, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AnswerScore {
    pub exact_match: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn score_answer(prediction: &str, reference: &str) -> AnswerScore {
    let p = normalize_answer(prediction);
    let r = normalize_answer(reference);
    let em = f64::from(u8::from(p == r));
    let pt: Vec<&str> = p.split_whitespace().collect();
    let rt: Vec<&str> = r.split_whitespace().collect();
    if pt.is_empty() || rt.is_empty() {
        let both = f64::from(u8::from(pt.is_empty() && rt.is_empty()));
        return AnswerScore {
            exact_match: em,
            f1: both,
            precision: both,
            recall: both,
        };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &rt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return AnswerScore {
            exact_match: em,
            ..Default::default()
        };
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / rt.len() as f64;
    AnswerScore {
        exact_match: em,
        f1: 2.0 * precision * recall / (precision + recall),
        precision,
        recall,
    }
}

/// Dataset-level answer metrics, means × 100.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QaScores {
    pub exact_match: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn qa_metrics<P: AsRef<str>, R: AsRef<str>>(predictions: &[P], references: &[R]) -> Result<QaScores> {
    if predictions.len() != references.len() {
        return Err(Error::shape("qa_metrics", &[predictions.len()], &[references.len()]));
    }
    let n = predictions.len().max(1) as f64;
    let mut out = QaScores::default();
    for (p, r) in predictions.iter().zip(references) {
        let s = score_answer(p.as_ref(), r.as_ref());
        out.exact_match += s.exact_match;
        out.f1 += s.f1;
        out.precision += s.precision;
        out.recall += s.recall;
    }
    out.exact_match *= 100.0 / n;
    out.f1 *= 100.0 / n;
    out.precision *= 100.0 / n;
    out.recall *= 100.0 / n;
    Ok(out)
}
