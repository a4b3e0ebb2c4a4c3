//! Multi-label evaluation: protein-centric Fmax, micro and macro AUPR,
//! example-based F1, subset accuracy and the Davies-Bouldin index.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("scores {scores:?} and labels {labels:?} must be equal-shaped N×M matrices")]
    Shape { scores: Vec<usize>, labels: Vec<usize> },
    #[error("labels contain no positive entry")]
    NoPositives,
    #[error("labels must be 0 or 1, found {0}")]
    NonBinary(f64),
    #[error("Davies-Bouldin needs at least two clusters, got {0}")]
    TooFewClusters(usize),
    #[error("clusters {0} and {1} share a centroid")]
    IdenticalCentroids(usize, usize),
    #[error("{0} embeddings but {1} cluster labels")]
    ClusterLength(usize, usize),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Default number of grid intervals for Fmax: thresholds `0.00, 0.01, .., 1.00`.
pub const FMAX_STEPS: usize = 100;

fn dims(scores: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    if scores.rank() != 2 || scores.shape() != labels.shape() {
        return Err(MetricError::Shape { scores: scores.shape().to_vec(), labels: labels.shape().to_vec() });
    }
    if let Some(&v) = labels.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(MetricError::NonBinary(v));
    }
    Ok((scores.shape()[0], scores.shape()[1]))
}

fn require_positive(labels: &Tensor) -> Result<()> {
    if labels.data().contains(&1.0) {
        Ok(())
    } else {
        Err(MetricError::NoPositives)
    }
}

/// Averaged precision and recall at one threshold, or `None` when no
/// protein has a prediction.
fn precision_recall_at(scores: &Tensor, labels: &Tensor, n: usize, m: usize, tau: f64) -> Option<(f64, f64)> {
    let (mut p_sum, mut p_count, mut r_sum, mut r_count) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        let s = &scores.data()[i * m..(i + 1) * m];
        let y = &labels.data()[i * m..(i + 1) * m];
        let predicted = s.iter().filter(|&&v| v >= tau).count();
        let truth = y.iter().filter(|&&v| v == 1.0).count();
        let hit = s.iter().zip(y).filter(|(&v, &t)| v >= tau && t == 1.0).count();
        if predicted > 0 {
            p_sum += hit as f64 / predicted as f64;
            p_count += 1;
        }
        if truth > 0 {
            r_sum += hit as f64 / truth as f64;
            r_count += 1;
        }
    }
    (p_count > 0).then(|| (p_sum / p_count as f64, r_sum / r_count as f64))
}

/// Protein-centric Fmax on a `steps + 1` point grid, returning the value and
/// the first threshold that attains it. Precision is averaged over proteins
/// with at least one prediction, recall over proteins with at least one label.
pub fn fmax_with_grid(scores: &Tensor, labels: &Tensor, steps: usize) -> Result<(f64, f64)> {
    let (n, m) = dims(scores, labels)?;
    require_positive(labels)?;
    let mut best = (0.0, 0.0);
    for k in 0..=steps {
        let tau = k as f64 / steps as f64;
        if let Some((p, r)) = precision_recall_at(scores, labels, n, m, tau) {
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            if f > best.0 {
                best = (f, tau);
            }
        }
    }
    Ok(best)
}

pub fn fmax(scores: &Tensor, labels: &Tensor) -> Result<(f64, f64)> {
    fmax_with_grid(scores, labels, FMAX_STEPS)
}

/// Step-wise area under the precision-recall curve: `Σ_k (R_k − R_{k−1}) P_k`
/// over distinct score thresholds in decreasing order, ties entering together.
/// `None` when there is no positive.
pub fn aupr(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut area, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += (labels[order[i]] == 1.0) as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        area += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(area)
}

/// AUPR over all flattened (protein, term) pairs.
pub fn aupr_micro(scores: &Tensor, labels: &Tensor) -> Result<f64> {
    dims(scores, labels)?;
    aupr(scores.data(), labels.data()).ok_or(MetricError::NoPositives)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAupr {
    pub value: f64,
    /// Per-term AUPR, `None` for terms without positives.
    pub per_term: Vec<Option<f64>>,
    pub skipped: usize,
}

/// Mean of per-term AUPRs over terms that have at least one positive.
pub fn aupr_macro(scores: &Tensor, labels: &Tensor) -> Result<MacroAupr> {
    let (n, m) = dims(scores, labels)?;
    require_positive(labels)?;
    let column = |t: &Tensor, j: usize| -> Vec<f64> { (0..n).map(|i| t.data()[i * m + j]).collect() };
    let per_term: Vec<Option<f64>> = (0..m).map(|j| aupr(&column(scores, j), &column(labels, j))).collect();
    let present: Vec<f64> = per_term.iter().flatten().copied().collect();
    Ok(MacroAupr { value: present.iter().sum::<f64>() / present.len() as f64, skipped: m - present.len(), per_term })
}

/// Example-based F1 averaged over proteins (two empty sets count as 1) and
/// subset accuracy, both after binarizing scores at `tau`.
pub fn f1_acc(scores: &Tensor, labels: &Tensor, tau: f64) -> Result<(f64, f64)> {
    let (n, m) = dims(scores, labels)?;
    let (mut f1, mut exact) = (0.0, 0usize);
    for i in 0..n {
        let s = &scores.data()[i * m..(i + 1) * m];
        let y = &labels.data()[i * m..(i + 1) * m];
        let pred: Vec<bool> = s.iter().map(|&v| v >= tau).collect();
        let truth: Vec<bool> = y.iter().map(|&v| v == 1.0).collect();
        let hit = pred.iter().zip(&truth).filter(|(a, b)| **a && **b).count();
        let denom = pred.iter().filter(|&&p| p).count() + truth.iter().filter(|&&t| t).count();
        f1 += if denom == 0 { 1.0 } else { 2.0 * hit as f64 / denom as f64 };
        exact += (pred == truth) as usize;
    }
    Ok((f1 / n as f64, exact as f64 / n as f64))
}

/// Assigns cluster ids to rows with identical label sets, numbered by first appearance.
pub fn label_set_clusters(labels: &Tensor) -> Vec<usize> {
    let m = labels.shape()[1];
    let mut seen: IndexMap<Vec<bool>, usize> = IndexMap::new();
    labels
        .data()
        .chunks(m)
        .map(|row| {
            let key: Vec<bool> = row.iter().map(|&v| v == 1.0).collect();
            let next = seen.len();
            *seen.entry(key).or_insert(next)
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Davies-Bouldin index with Euclidean centroids and mean distance to the
/// centroid as cluster scatter. Lower means tighter, better separated clusters.
pub fn davies_bouldin(embeddings: &Tensor, clusters: &[usize]) -> Result<f64> {
    let n = embeddings.shape()[0];
    if clusters.len() != n {
        return Err(MetricError::ClusterLength(n, clusters.len()));
    }
    let d = embeddings.numel() / n;
    let ids: Vec<usize> = {
        let mut v = clusters.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    if ids.len() < 2 {
        return Err(MetricError::TooFewClusters(ids.len()));
    }
    let rows: Vec<&[f64]> = embeddings.data().chunks(d).collect();
    let mut centroids = Vec::with_capacity(ids.len());
    let mut scatter = Vec::with_capacity(ids.len());
    for &c in &ids {
        let members: Vec<&[f64]> = (0..n).filter(|&i| clusters[i] == c).map(|i| rows[i]).collect();
        let mut centroid = vec![0.0; d];
        for r in &members {
            for (acc, v) in centroid.iter_mut().zip(r.iter()) {
                *acc += v;
            }
        }
        centroid.iter_mut().for_each(|v| *v /= members.len() as f64);
        scatter.push(members.iter().map(|r| distance(r, &centroid)).sum::<f64>() / members.len() as f64);
        centroids.push(centroid);
    }
    let k = ids.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in (0..k).filter(|&j| j != i) {
            let sep = distance(&centroids[i], &centroids[j]);
            if sep == 0.0 {
                return Err(MetricError::IdenticalCentroids(ids[i.min(j)], ids[i.max(j)]));
            }
            worst = worst.max((scatter[i] + scatter[j]) / sep);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// All prediction metrics plus named Davies-Bouldin scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fmax: f64,
    pub fmax_threshold: f64,
    pub m_aupr: f64,
    #[serde(rename = "M_aupr")]
    pub macro_aupr: f64,
    pub macro_skipped: usize,
    pub f1: f64,
    pub acc: f64,
    pub per_term_aupr: Vec<Option<f64>>,
    pub db_scores: IndexMap<String, f64>,
}

impl EvalReport {
    pub fn compute(scores: &Tensor, labels: &Tensor) -> Result<Self> {
        let (fmax, fmax_threshold) = fmax(scores, labels)?;
        let m_aupr = aupr_micro(scores, labels)?;
        let macro_ = aupr_macro(scores, labels)?;
        let (f1, acc) = f1_acc(scores, labels, 0.5)?;
        Ok(Self {
            fmax,
            fmax_threshold,
            m_aupr,
            macro_aupr: macro_.value,
            macro_skipped: macro_.skipped,
            f1,
            acc,
            per_term_aupr: macro_.per_term,
            db_scores: IndexMap::new(),
        })
    }

    /// Line-oriented `key<TAB>value` rendering with a comment header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# f1 is example-based at threshold 0.5; acc is subset accuracy\n");
        let mut line = |k: &str, v: String| out.push_str(&format!("{k}\t{v}\n"));
        line("fmax", format!("{:.6}", self.fmax));
        line("fmax_threshold", format!("{:.2}", self.fmax_threshold));
        line("m-aupr", format!("{:.6}", self.m_aupr));
        line("M-aupr", format!("{:.6}", self.macro_aupr));
        line("M-aupr_skipped_terms", self.macro_skipped.to_string());
        line("f1", format!("{:.6}", self.f1));
        line("acc", format!("{:.6}", self.acc));
        for (j, a) in self.per_term_aupr.iter().enumerate() {
            line(&format!("aupr_term{j}"), a.map_or("NA".into(), |v| format!("{v:.6}")));
        }
        for (name, v) in &self.db_scores {
            line(&format!("db_{name}"), format!("{v:.6}"));
        }
        out
    }
}
