//! Next-node prediction on path sequences `s t s v1 v2 ... t`.
//!
//! When the logits depend only on the target `t` and the current node, the
//! cross-entropy optimum for row `(t, v)` is the empirical frequency
//! `N[t][v][u] / sum_u N[t][v][u]`, and rows never observed in training are
//! left unconstrained by the loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TheoryError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathDataset {
    sequences: Vec<Vec<usize>>,
    vocabulary: Vec<usize>,
}

impl PathDataset {
    pub fn new(sequences: Vec<Vec<usize>>) -> Result<Self, TheoryError> {
        for (k, s) in sequences.iter().enumerate() {
            if s.len() < 4 {
                return Err(TheoryError::InvalidDataset(format!(
                    "sequence {k} has {} tokens, need at least 4",
                    s.len()
                )));
            }
            if s[2] != s[0] {
                return Err(TheoryError::InvalidDataset(format!(
                    "sequence {k}: third token {} does not repeat the source {}",
                    s[2], s[0]
                )));
            }
            if s[s.len() - 1] != s[1] {
                return Err(TheoryError::InvalidDataset(format!(
                    "sequence {k}: last token {} is not the target {}",
                    s[s.len() - 1],
                    s[1]
                )));
            }
        }
        let mut vocabulary: Vec<usize> = sequences.iter().flatten().copied().collect();
        vocabulary.sort_unstable();
        vocabulary.dedup();
        Ok(Self { sequences, vocabulary })
    }

    /// Builds `s t s v1 ... t` from each path `s v1 ... t`.
    pub fn from_paths(paths: &[Vec<usize>]) -> Result<Self, TheoryError> {
        let sequences = paths
            .iter()
            .map(|p| {
                let (s, t) = match (p.first(), p.last()) {
                    (Some(&s), Some(&t)) => (s, t),
                    _ => (0, 0),
                };
                let mut seq = vec![s, t];
                seq.extend_from_slice(p);
                seq
            })
            .collect();
        Self::new(sequences)
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn vocabulary(&self) -> &[usize] {
        &self.vocabulary
    }

    /// `N[(t, v)][u]`, counted over the supervised positions (the fourth
    /// token onward), in vocabulary order.
    pub fn transition_counts(&self) -> BTreeMap<(usize, usize), Vec<u64>> {
        let index = |x: usize| self.vocabulary.binary_search(&x).expect("token in vocabulary");
        let mut counts: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
        for s in &self.sequences {
            let t = s[1];
            for i in 3..s.len() {
                let row = counts.entry((t, s[i - 1])).or_insert_with(|| vec![0; self.vocabulary.len()]);
                row[index(s[i])] += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RowStatus {
    Constrained,
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRow {
    pub target: usize,
    pub current: usize,
    pub status: RowStatus,
    /// Number of supervised positions that use this row.
    pub support: u64,
    /// Raw logits for trained models; absent for the closed form.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    pub probs: Vec<f64>,
}

/// One row per (target, current) pair over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularLogitModel {
    pub vocabulary: Vec<usize>,
    pub rows: Vec<LogitRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

impl TabularLogitModel {
    pub fn row(&self, target: usize, current: usize) -> Option<&LogitRow> {
        self.rows
            .binary_search_by(|r| (r.target, r.current).cmp(&(target, current)))
            .ok()
            .map(|i| &self.rows[i])
    }

    pub fn unconstrained(&self) -> impl Iterator<Item = &LogitRow> {
        self.rows.iter().filter(|r| r.status == RowStatus::Unconstrained)
    }

    /// Largest probability gap over rows constrained in both models.
    pub fn constrained_linf(&self, other: &TabularLogitModel) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.status == RowStatus::Constrained)
            .filter_map(|r| other.row(r.target, r.current).map(|o| (r, o)))
            .filter(|(_, o)| o.status == RowStatus::Constrained)
            .flat_map(|(r, o)| r.probs.iter().zip(&o.probs).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }
}

fn all_pairs(vocab: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    vocab.iter().flat_map(move |&t| vocab.iter().map(move |&v| (t, v)))
}

/// Closed-form optimum. Unconstrained rows get the uniform distribution,
/// which is one of the many minimizers.
pub fn frequency_logits(d: &PathDataset) -> TabularLogitModel {
    let counts = d.transition_counts();
    let vocab = d.vocabulary().to_vec();
    let k = vocab.len();
    let rows = all_pairs(&vocab)
        .map(|(t, v)| match counts.get(&(t, v)) {
            Some(c) => {
                let total: u64 = c.iter().sum();
                LogitRow {
                    target: t,
                    current: v,
                    status: RowStatus::Constrained,
                    support: total,
                    logits: None,
                    probs: c.iter().map(|&x| x as f64 / total as f64).collect(),
                }
            }
            None => LogitRow {
                target: t,
                current: v,
                status: RowStatus::Unconstrained,
                support: 0,
                logits: None,
                probs: vec![1.0 / k as f64; k],
            },
        })
        .collect();
    TabularLogitModel { vocabulary: vocab, rows, final_loss: None }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Full-batch gradient descent from zero logits on the cross-entropy of every
/// supervised position, averaged over sequences.
pub fn fit_tabular(d: &PathDataset, steps: usize, lr: f64) -> Result<TabularLogitModel, TheoryError> {
    if steps == 0 {
        return Err(TheoryError::InvalidDataset("steps must be at least 1".into()));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(TheoryError::InvalidDataset(format!("learning rate {lr} must be positive")));
    }
    let vocab = d.vocabulary().to_vec();
    let k = vocab.len();
    let counts = d.transition_counts();
    let scale = 1.0 / d.sequences().len().max(1) as f64;
    let pairs: Vec<(usize, usize)> = all_pairs(&vocab).collect();
    let mut theta: Vec<Vec<f64>> = vec![vec![0.0; k]; pairs.len()];
    let row_counts: Vec<Option<&Vec<u64>>> = pairs.iter().map(|p| counts.get(p)).collect();

    let loss_of = |theta: &[Vec<f64>]| -> f64 {
        row_counts
            .iter()
            .zip(theta)
            .filter_map(|(c, z)| c.map(|c| (c, z)))
            .map(|(c, z)| {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                c.iter().zip(z).map(|(&n, &zi)| n as f64 * (lse - zi)).sum::<f64>()
            })
            .sum::<f64>()
            * scale
    };

    for step in 0..steps {
        for (z, c) in theta.iter_mut().zip(&row_counts) {
            // Rows without support contribute nothing to the loss.
            let Some(c) = c else { continue };
            let total: u64 = c.iter().sum();
            let p = softmax(z);
            for ((zi, pi), &n) in z.iter_mut().zip(&p).zip(c.iter()) {
                *zi -= lr * scale * (total as f64 * pi - n as f64);
            }
        }
        if theta.iter().flatten().any(|x| !x.is_finite()) {
            return Err(TheoryError::NonFiniteLoss { step });
        }
    }
    let final_loss = loss_of(&theta);
    if !final_loss.is_finite() {
        return Err(TheoryError::NonFiniteLoss { step: steps });
    }
    let rows = pairs
        .iter()
        .zip(theta)
        .zip(&row_counts)
        .map(|((&(t, v), z), c)| LogitRow {
            target: t,
            current: v,
            status: if c.is_some() { RowStatus::Constrained } else { RowStatus::Unconstrained },
            support: c.map_or(0, |c| c.iter().sum()),
            probs: softmax(&z),
            logits: Some(z),
        })
        .collect();
    Ok(TabularLogitModel { vocabulary: vocab, rows, final_loss: Some(final_loss) })
}
