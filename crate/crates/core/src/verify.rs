//! Pair verification by cosine similarity with k-fold threshold selection.

use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::PairList;
use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: usize = 10;

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub n_pairs: usize,
    pub fold_accuracies: Vec<f64>,
    pub fold_thresholds: Vec<f64>,
    pub mean_accuracy: f64,
    pub fold_seed: u64,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n_pairs: {}", self.n_pairs)?;
        writeln!(f, "folds: {}", self.fold_accuracies.len())?;
        writeln!(f, "fold_seed: {}", self.fold_seed)?;
        writeln!(f, "mean_accuracy: {:.6}", self.mean_accuracy)?;
        writeln!(f, "fold  threshold  accuracy")?;
        for (i, (t, a)) in self.fold_thresholds.iter().zip(&self.fold_accuracies).enumerate() {
            writeln!(f, "{:<5} {:>+.6} {:>9.6}", i + 1, t, a)?;
        }
        Ok(())
    }
}

/// Smallest threshold maximizing training accuracy of the rule `sim >= t`.
///
/// Candidates are the smallest similarity, the midpoints between consecutive
/// distinct similarities, and the midpoint between the largest one and 1.
pub fn best_threshold(sims: &[f64], same: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]));

    // At the smallest value everything is predicted "same".
    let mut correct: i64 = same.iter().filter(|&&s| s).count() as i64;
    let mut best = (correct, sims[order[0]]);
    let mut i = 0;
    while i < order.len() {
        let v = sims[order[i]];
        while i < order.len() && sims[order[i]] == v {
            correct += if same[order[i]] { -1 } else { 1 };
            i += 1;
        }
        let next = if i < order.len() { sims[order[i]] } else { 1.0 };
        if next > v && correct > best.0 {
            best = (correct, 0.5 * (v + next));
        }
    }
    best.1
}

fn accuracy(sims: &[f64], same: &[bool], t: f64) -> f64 {
    let hits = sims.iter().zip(same).filter(|(&s, &y)| (s >= t) == y).count();
    hits as f64 / sims.len() as f64
}

/// k-fold evaluation over precomputed similarities.
///
/// Positives and negatives are shuffled separately with a ChaCha8 stream
/// seeded by `seed`, concatenated, and dealt round-robin into `folds` folds,
/// so fold sizes differ by at most one and each fold keeps the class balance.
pub fn evaluate_similarities(
    sims: &[f64],
    same: &[bool],
    folds: usize,
    seed: u64,
) -> Result<VerificationReport> {
    if sims.len() != same.len() {
        return Err(Error::invalid("similarity and label counts differ"));
    }
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if sims.len() < folds {
        return Err(Error::invalid(format!("{} pairs cannot fill {folds} folds", sims.len())));
    }
    if let Some(s) = sims.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite similarity {s}")));
    }

    let n = sims.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..n).filter(|&i| same[i]).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !same[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold_of = vec![0; n];
    for (rank, &i) in pos.iter().chain(&neg).enumerate() {
        fold_of[i] = rank % folds;
    }

    let mut fold_accuracies = Vec::with_capacity(folds);
    let mut fold_thresholds = Vec::with_capacity(folds);
    for f in 0..folds {
        let split = |want_test: bool| -> (Vec<f64>, Vec<bool>) {
            (0..n)
                .filter(|&i| (fold_of[i] == f) == want_test)
                .map(|i| (sims[i], same[i]))
                .unzip()
        };
        let (train_s, train_y) = split(false);
        let (test_s, test_y) = split(true);
        let t = best_threshold(&train_s, &train_y);
        fold_thresholds.push(t);
        fold_accuracies.push(accuracy(&test_s, &test_y, t));
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / folds as f64;
    Ok(VerificationReport {
        n_pairs: n,
        fold_accuracies,
        fold_thresholds,
        mean_accuracy,
        fold_seed: seed,
    })
}

/// Similarities of the embedding rows named by each pair, then
/// [`evaluate_similarities`].
pub fn evaluate_pairs(
    embeddings: &Array2<f64>,
    pairs: &PairList,
    folds: usize,
    seed: u64,
) -> Result<VerificationReport> {
    let n = embeddings.nrows();
    let mut sims = Vec::with_capacity(pairs.len());
    for (k, p) in pairs.pairs.iter().enumerate() {
        if p.a >= n || p.b >= n {
            return Err(Error::invalid(format!(
                "pair {k} references row {} of {n}",
                p.a.max(p.b)
            )));
        }
        let a = embeddings.row(p.a).to_vec();
        let b = embeddings.row(p.b).to_vec();
        sims.push(cosine_similarity(&a, &b)?);
    }
    let same: Vec<bool> = pairs.pairs.iter().map(|p| p.same).collect();
    evaluate_similarities(&sims, &same, folds, seed)
}
