//! Metrics and convergence detection.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::HeadKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Bleu,
    TokenAccuracy,
    ExactMatch,
    ValLoss,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::TokenAccuracy => "token_accuracy",
            Metric::ExactMatch => "exact_match",
            Metric::ValLoss => "val_loss",
        }
    }

    /// Whether computing the metric requires generating outputs.
    pub fn decode_needed(&self) -> bool {
        matches!(self, Metric::Bleu | Metric::TokenAccuracy | Metric::ExactMatch)
    }

    pub fn valid_for(&self, kind: HeadKind) -> bool {
        match self {
            Metric::Bleu | Metric::ExactMatch => kind == HeadKind::Seq2SeqLm,
            Metric::TokenAccuracy | Metric::ValLoss => true,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bleu" => Ok(Metric::Bleu),
            "token_accuracy" => Ok(Metric::TokenAccuracy),
            "exact_match" => Ok(Metric::ExactMatch),
            "val_loss" => Ok(Metric::ValLoss),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Evaluator {
    pub metric: Metric,
    pub split: Split,
}

impl Evaluator {
    pub fn val(metric: Metric) -> Self {
        Self {
            metric,
            split: Split::Val,
        }
    }

    pub fn decode_needed(&self) -> bool {
        self.metric.decode_needed()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceCriterion {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for ConvergenceCriterion {
    fn default() -> Self {
        Self {
            patience: 5,
            min_delta: 1e-3,
        }
    }
}

impl ConvergenceCriterion {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("convergence patience must be at least 1".into()));
        }
        if self.min_delta.is_nan() || self.min_delta < 0.0 {
            return Err(Error::Config(format!(
                "convergence min_delta must be non-negative, got {}",
                self.min_delta
            )));
        }
        Ok(())
    }
}

/// True iff each of the last `patience` evaluations failed to improve the
/// best earlier loss by at least `min_delta`.
pub fn detect_convergence(history: &[f64], criterion: &ConvergenceCriterion) -> bool {
    let patience = criterion.patience.max(1);
    if history.len() <= patience {
        return false;
    }
    let mut best = history[0];
    let mut stale = 0;
    for &loss in &history[1..] {
        if best - loss >= criterion.min_delta {
            stale = 0;
        } else {
            stale += 1;
        }
        best = best.min(loss);
    }
    stale >= patience
}

fn check_corpora<A, B>(candidates: &[A], references: &[B]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::Input(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Input("corpus is empty".into()));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU (n = 1..4, uniform weights, no smoothing) on a 0-100 scale.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_corpora(candidates, references)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matched[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let brevity = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * brevity * log_precision.exp())
}

/// Matched positions over reference positions; missing positions are wrong.
pub fn token_accuracy<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_corpora(candidates, references)?;
    let positions: usize = references.iter().map(Vec::len).sum();
    if positions == 0 {
        return Err(Error::Input("references contain no tokens".into()));
    }
    let matched: usize = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| c.iter().zip(r).filter(|(a, b)| a == b).count())
        .sum();
    Ok(matched as f64 / positions as f64)
}

pub fn exact_match<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_corpora(candidates, references)?;
    let hits = candidates.iter().zip(references).filter(|(c, r)| c == r).count();
    Ok(hits as f64 / candidates.len() as f64)
}
