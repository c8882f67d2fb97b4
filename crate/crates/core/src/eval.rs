//! Ranking metrics, batch evaluation of a scorer over fold-in users and the
//! subsample bootstrap.
//!
//! Ties in scores are broken by ascending item index. DCG uses the natural
//! logarithm in both numerator and ideal value, so nDCG does not depend on the
//! base.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FoldInPair;
use crate::error::{Error, Result};
use crate::model::{score_rows, ModelParams};
use crate::numerics::{Matrix, Rng};

pub const DEFAULT_CUTOFFS: [usize; 4] = [20, 50, 75, 100];

/// Users scored per call to [`Scorer::score`].
const SCORE_CHUNK: usize = 512;

/// Anything that turns fold-in users into one score row per user.
pub trait Scorer: Sync {
    fn num_items(&self) -> usize;
    fn score(&self, users: &[&FoldInPair]) -> Result<Matrix>;
}

impl Scorer for ModelParams {
    fn num_items(&self) -> usize {
        ModelParams::num_items(self)
    }

    fn score(&self, users: &[&FoldInPair]) -> Result<Matrix> {
        let rows: Vec<&[usize]> = users.iter().map(|u| u.fold_in.as_slice()).collect();
        score_rows(self, &rows)
    }
}

/// Scores the held-out items 1 and everything else 0.
#[derive(Clone, Copy, Debug)]
pub struct OracleScorer {
    pub num_items: usize,
}

impl Scorer for OracleScorer {
    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score(&self, users: &[&FoldInPair]) -> Result<Matrix> {
        let mut m = Matrix::zeros(users.len(), self.num_items);
        for (u, p) in users.iter().enumerate() {
            for &i in &p.held_out {
                m.set(u, i, 1.0);
            }
        }
        Ok(m)
    }
}

/// A user's items by descending score, fold-in items removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedList {
    pub user: u64,
    pub items: Vec<usize>,
}

impl RankedList {
    /// Ranks `scores`, masking `exclude`. Keeps at most `limit` items.
    pub fn from_scores(user: u64, scores: &[f64], exclude: &[usize], limit: usize) -> Result<RankedList> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score of item {i} for user {user}")));
        }
        let mut masked = vec![false; scores.len()];
        for &i in exclude {
            if let Some(m) = masked.get_mut(i) {
                *m = true;
            }
        }
        let mut items: Vec<usize> = (0..scores.len()).filter(|&i| !masked[i]).collect();
        let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
        if limit < items.len() {
            items.select_nth_unstable_by(limit, by_score);
            items.truncate(limit);
        }
        items.sort_unstable_by(by_score);
        Ok(RankedList { user, items })
    }
}

/// `Σ_{k≤K} ⟦r(k) ∈ I₁⟧ / min(K, |I₁|)`.
pub fn recall_at_k(ranked: &[usize], positives: &[usize], k: usize) -> f64 {
    if positives.is_empty() || k == 0 {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| positives.contains(i)).count();
    hits as f64 / k.min(positives.len()) as f64
}

/// `DCG@K = Σ_{k≤K} (2^⟦r(k) ∈ I₁⟧ − 1) / ln(k + 1)`, divided by the DCG of
/// `min(K, |I₁|)` hits at the top ranks.
pub fn ndcg_at_k(ranked: &[usize], positives: &[usize], k: usize) -> f64 {
    if positives.is_empty() || k == 0 {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, i)| {
            let gain = if positives.contains(i) { 1.0 } else { 0.0 };
            (2f64.powf(gain) - 1.0) / ((r + 2) as f64).ln()
        })
        .sum();
    let idcg: f64 = (0..k.min(positives.len())).map(|r| 1.0 / ((r + 2) as f64).ln()).sum();
    dcg / idcg
}

/// Per-user metric values, `recall[c][u]` for cutoff index `c` and user `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerUserMetrics {
    pub users: Vec<u64>,
    pub cutoffs: Vec<usize>,
    pub recall: Vec<Vec<f64>>,
    pub ndcg: Vec<Vec<f64>>,
}

impl PerUserMetrics {
    pub fn mean_recall(&self, cutoff: usize) -> Option<f64> {
        let c = self.cutoffs.iter().position(|&k| k == cutoff)?;
        Some(mean(&self.recall[c]))
    }

    pub fn mean_ndcg(&self, cutoff: usize) -> Option<f64> {
        let c = self.cutoffs.iter().position(|&k| k == cutoff)?;
        Some(mean(&self.ndcg[c]))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores every user, masks their fold-in items and computes each metric.
pub fn evaluate(scorer: &dyn Scorer, users: &[FoldInPair], cutoffs: &[usize]) -> Result<PerUserMetrics> {
    if users.is_empty() {
        return Err(Error::Empty("no users to evaluate".into()));
    }
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::InvalidArgument(format!("cutoffs must be positive, got {cutoffs:?}")));
    }
    if let Some(u) = users.iter().find(|u| u.held_out.is_empty()) {
        return Err(Error::InvalidArgument(format!("user {} has no held-out items", u.user)));
    }
    let limit = *cutoffs.iter().max().unwrap();
    let mut ranked = Vec::with_capacity(users.len());
    for chunk in users.chunks(SCORE_CHUNK) {
        let refs: Vec<&FoldInPair> = chunk.iter().collect();
        let scores = scorer.score(&refs)?;
        if scores.shape() != (chunk.len(), scorer.num_items()) {
            return Err(Error::shape("scorer output", scores.shape(), (chunk.len(), scorer.num_items())));
        }
        let lists: Vec<Result<RankedList>> = chunk
            .par_iter()
            .enumerate()
            .map(|(k, u)| RankedList::from_scores(u.user, scores.row(k), &u.fold_in, limit))
            .collect();
        for l in lists {
            ranked.push(l?);
        }
    }
    let recall = cutoffs
        .iter()
        .map(|&k| ranked.iter().zip(users).map(|(r, u)| recall_at_k(&r.items, &u.held_out, k)).collect())
        .collect();
    let ndcg = cutoffs
        .iter()
        .map(|&k| ranked.iter().zip(users).map(|(r, u)| ndcg_at_k(&r.items, &u.held_out, k)).collect())
        .collect();
    Ok(PerUserMetrics {
        users: users.iter().map(|u| u.user).collect(),
        cutoffs: cutoffs.to_vec(),
        recall,
        ndcg,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub fraction: f64,
    pub repeats: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            fraction: 0.2,
            repeats: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

pub const MIN_BOOTSTRAP_USERS: usize = 10;

/// Linear interpolation between order statistics of an ascending slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile interval of the mean over `repeats` subsamples of
/// `⌈fraction·n⌉` users drawn without replacement.
pub fn bootstrap_ci(values: &[f64], cfg: &BootstrapConfig) -> Result<(f64, f64)> {
    let n = values.len();
    if n < MIN_BOOTSTRAP_USERS {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_USERS} users, got {n}"
        )));
    }
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) || cfg.repeats == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidArgument(format!("invalid bootstrap settings {cfg:?}")));
    }
    let size = ((cfg.fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = Rng::new(cfg.seed);
    let mut means: Vec<f64> = (0..cfg.repeats)
        .map(|_| {
            let idx = rng.sample_indices(n, size);
            idx.iter().map(|&i| values[i]).sum::<f64>() / size as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok((quantile(&means, tail), quantile(&means, 1.0 - tail)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub cutoff: usize,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl ReportRow {
    /// Non-overlapping confidence intervals, `self` above `other`.
    pub fn significantly_above(&self, other: &ReportRow) -> bool {
        self.ci_low > other.ci_high
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_users: usize,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Means per cutoff with bootstrap intervals. Every metric reuses the same
    /// seed, so all intervals come from the same user subsamples.
    pub fn from_metrics(m: &PerUserMetrics, cfg: &BootstrapConfig) -> Result<EvalReport> {
        let mut rows = Vec::new();
        for (name, table) in [("recall", &m.recall), ("ndcg", &m.ndcg)] {
            for (c, &k) in m.cutoffs.iter().enumerate() {
                let value = mean(&table[c]);
                let (lo, hi) = bootstrap_ci(&table[c], cfg)?;
                // subsample means bracket the full mean except in degenerate draws
                rows.push(ReportRow {
                    metric: name.to_string(),
                    cutoff: k,
                    value,
                    ci_low: lo.min(value),
                    ci_high: hi.max(value),
                });
            }
        }
        Ok(EvalReport {
            num_users: m.users.len(),
            rows,
        })
    }

    pub fn get(&self, metric: &str, cutoff: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.metric == metric && r.cutoff == cutoff)
    }

    /// TSV with columns `metric, cutoff, value, ci_low, ci_high`.
    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "metric\tcutoff\tvalue\tci_low\tci_high")?;
        for r in &self.rows {
            writeln!(
                w,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                r.metric, r.cutoff, r.value, r.ci_low, r.ci_high
            )?;
        }
        writeln!(w, "# users\t{}", self.num_users)
    }
}
