//! Pair verification with cross-validated thresholds, and closed-set
//! classification against learned class weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FOLDS: usize = 10;

/// Index pair plus whether both share an identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub verification: f64,
    pub verification_std: f64,
    pub classification: f64,
    pub pairs: usize,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// All positive pairs of consecutive same-label items, plus the same number
/// of negative pairs drawn deterministically from `seed`.
pub fn make_pairs(labels: &[usize], seed: u64) -> Result<Vec<Pair>> {
    let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(Error::Contract(
            "verification needs at least two identities".into(),
        ));
    }
    let mut pairs: Vec<Pair> = by_label
        .values()
        .flat_map(|idx| {
            idx.windows(2).map(|w| Pair {
                a: w[0],
                b: w[1],
                same: true,
            })
        })
        .collect();
    let positives = pairs.len();
    if positives == 0 {
        return Err(Error::Contract(
            "verification needs two samples of some identity".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while pairs.len() < 2 * positives {
        let (a, b) = (
            rng.random_range(0..labels.len()),
            rng.random_range(0..labels.len()),
        );
        if labels[a] != labels[b] {
            pairs.push(Pair { a, b, same: false });
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

fn accuracy(scored: &[(f64, bool)], threshold: f64) -> f64 {
    let hits = scored
        .iter()
        .filter(|(s, same)| (*s > threshold) == *same)
        .count();
    hits as f64 / scored.len() as f64
}

/// Threshold maximizing accuracy on `scored`, chosen among midpoints of
/// consecutive distinct sorted scores and the two outer values.
pub fn best_threshold(scored: &[(f64, bool)]) -> f64 {
    let mut order: Vec<(f64, bool)> = scored.to_vec();
    order.sort_by(|x, y| x.0.total_cmp(&y.0));
    // Threshold below everything: every pair is called "same".
    let mut correct = order.iter().filter(|p| p.1).count() as isize;
    let (mut best, mut best_t) = (correct, order[0].0 - 1.0);
    for (k, &(score, same)) in order.iter().enumerate() {
        correct += if same { -1 } else { 1 };
        let next = order.get(k + 1).map(|p| p.0);
        if next == Some(score) {
            continue;
        }
        if correct > best {
            best = correct;
            best_t = next.map_or(score + 1.0, |n| 0.5 * (score + n));
        }
    }
    best_t
}

/// Mean and standard deviation of fold accuracies; each fold is scored with
/// the threshold fitted on the other folds.
pub fn verification_accuracy(embeddings: &[Vec<f64>], pairs: &[Pair]) -> Result<(f64, f64)> {
    if pairs.len() < FOLDS {
        return Err(Error::Contract(format!(
            "need at least {FOLDS} pairs, got {}",
            pairs.len()
        )));
    }
    let scored: Vec<(f64, bool)> = pairs
        .iter()
        .map(|p| (cosine(&embeddings[p.a], &embeddings[p.b]), p.same))
        .collect();
    let fold_of = |i: usize| i * FOLDS / scored.len();
    let mut accs = Vec::with_capacity(FOLDS);
    for f in 0..FOLDS {
        let (test, train): (Vec<_>, Vec<_>) = scored
            .iter()
            .enumerate()
            .partition(|(i, _)| fold_of(*i) == f);
        let train: Vec<(f64, bool)> = train.into_iter().map(|(_, p)| *p).collect();
        let test: Vec<(f64, bool)> = test.into_iter().map(|(_, p)| *p).collect();
        accs.push(accuracy(&test, best_threshold(&train)));
    }
    let mean = accs.iter().sum::<f64>() / FOLDS as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / FOLDS as f64;
    Ok((mean, var.sqrt()))
}

/// Fraction of items whose most cosine-similar class weight row is their label.
pub fn classification_accuracy(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    class_weights: &[Vec<f64>],
) -> Result<f64> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::Contract(
            "classification needs one label per embedding".into(),
        ));
    }
    let hits = embeddings
        .iter()
        .zip(labels)
        .filter(|(e, &l)| {
            let pred = class_weights
                .iter()
                .enumerate()
                .map(|(c, w)| (c, cosine(e, w)))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .map(|(c, _)| c);
            pred == Some(l)
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    class_weights: &[Vec<f64>],
    seed: u64,
) -> Result<EvalReport> {
    let pairs = make_pairs(labels, seed)?;
    let (verification, verification_std) = verification_accuracy(embeddings, &pairs)?;
    Ok(EvalReport {
        verification,
        verification_std,
        classification: classification_accuracy(embeddings, labels, class_weights)?,
        pairs: pairs.len(),
    })
}
