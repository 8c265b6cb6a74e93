//! Metrics, OOD splits, and result reporting.
//!
//! AUC is computed rank-based (ties share average rank), accuracy is exact
//! matching, and distribution-shift results are summarized as mean ± sample
//! standard deviation over seeds together with the drop Δ between the
//! in-distribution and OOD conditions. The OOD link split removes
//! tagged edges from the training view while the test view keeps them, so
//! a model never sees the withheld mechanism during training.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{DynamicGraph, Snapshot, TaskKind};
use crate::{Error, Result};

/// Area under the ROC curve of scored binary labels.
///
/// Rank-based: the probability that a random positive outscores a random
/// negative, with tied scores counted half. Requires both classes.
pub fn auc(scored: &[(f64, bool)]) -> Result<f64> {
    let positives = scored.iter().filter(|(_, y)| *y).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Domain(format!(
            "AUC undefined: {positives} positives, {negatives} negatives"
        )));
    }
    if let Some((s, _)) = scored.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {s} in AUC input")));
    }

    // Average ranks (1-based), ties sharing the mean rank of their block.
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if scored[idx].1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Domain("accuracy of an empty set is undefined".into()));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Uniformly samples `count` node pairs `(u, v)`, `u < v`, for which
/// `forbidden(u, v)` is false — used for negative links in both training
/// and evaluation.
///
/// Fails when the admissible set is too sparse to hit within a bounded
/// number of attempts.
pub fn sample_negatives<F>(
    num_nodes: usize,
    count: usize,
    forbidden: F,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>>
where
    F: Fn(usize, usize) -> bool,
{
    if num_nodes < 2 && count > 0 {
        return Err(Error::Config(
            "negative sampling needs at least two nodes".into(),
        ));
    }
    let mut out = Vec::with_capacity(count);
    let budget = 1000 * count.max(1);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Config(format!(
                "could not draw {count} negative pairs in {budget} attempts; \
                 graph too dense or forbidden set too large"
            )));
        }
        let u = rng.gen_range(0..num_nodes);
        let v = rng.gen_range(0..num_nodes);
        if u == v {
            continue;
        }
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        if forbidden(a, b) {
            continue;
        }
        out.push((a, b));
    }
    Ok(out)
}

/// Per-edge provenance tags: `(timestamp, u, v) -> tag`. Edges are stored
/// with `u <= v`, matching the canonical snapshot ordering.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeTags {
    map: BTreeMap<(usize, usize, usize), String>,
}

impl EdgeTags {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, t: usize, u: usize, v: usize, tag: impl Into<String>) {
        let (a, b) = if u <= v { (u, v) } else { (v, u) };
        self.map.insert((t, a, b), tag.into());
    }

    pub fn get(&self, t: usize, u: usize, v: usize) -> Option<&str> {
        let (a, b) = if u <= v { (u, v) } else { (v, u) };
        self.map.get(&(t, a, b)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize, usize), &str)> {
        self.map.iter().map(|(k, v)| (k, v.as_str()))
    }

    /// Serializes as `t u v tag` lines, sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ((t, u, v), tag) in &self.map {
            out.push_str(&format!("{t} {u} {v} {tag}\n"));
        }
        out
    }

    /// Parses the `t u v tag` line format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tags = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let mut int = |name: &str| -> Result<usize> {
                parts
                    .next()
                    .ok_or_else(|| Error::Parse {
                        line: i + 1,
                        msg: format!("missing {name}"),
                    })?
                    .parse()
                    .map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("malformed {name}"),
                    })
            };
            let t = int("timestamp")?;
            let u = int("source node")?;
            let v = int("target node")?;
            let tag = parts.next().ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "missing tag".into(),
            })?;
            tags.insert(t, u, v, tag);
        }
        Ok(tags)
    }
}

/// Outcome of an OOD link split: the training view with rule-matching
/// edges removed, the untouched test view, and scan statistics.
#[derive(Debug, Clone)]
pub struct OodSplit {
    pub train_view: DynamicGraph,
    pub test_view: DynamicGraph,
    pub removed_edges: usize,
    pub warnings: Vec<String>,
}

/// Splits a tagged link dataset for the OOD protocol: every edge whose tag
/// matches `rule` is removed from the training view's snapshots and link
/// labels, while the test view keeps the full graph. Node sets and
/// features are unchanged.
pub fn ood_split_links(
    g: &DynamicGraph,
    tags: &EdgeTags,
    rule: &str,
) -> Result<OodSplit> {
    let mut warnings = Vec::new();
    let mut removed = 0usize;
    let mut kept_total = 0usize;

    let mut snaps = Vec::with_capacity(g.len());
    for snap in g.snapshots() {
        let t = snap.timestamp();
        let kept: Vec<(usize, usize)> = snap
            .edges()
            .iter()
            .copied()
            .filter(|&(u, v)| {
                let matched = tags.get(t, u, v) == Some(rule);
                if matched {
                    removed += 1;
                }
                !matched
            })
            .collect();
        kept_total += kept.len();
        snaps.push(Snapshot::new(
            t,
            snap.node_count(),
            kept,
            snap.features().clone(),
        ));
    }
    if removed == 0 {
        warnings.push(format!("rule {rule:?} matched no edges"));
    }
    if kept_total == 0 && removed > 0 {
        return Err(Error::Config(format!(
            "rule {rule:?} matched every edge; training view would be empty"
        )));
    }

    let labels = g.labels().cloned().map(|l| match l {
        crate::graph::LabelSet::Link(links) => crate::graph::LabelSet::Link(
            links
                .into_iter()
                .filter(|e| tags.get(e.t + 1, e.u, e.v) != Some(rule))
                .collect(),
        ),
        other => other,
    });
    let train_view = DynamicGraph::new(
        g.node_count(),
        g.feature_dim(),
        snaps,
        TaskKind::Link,
        labels,
    );
    Ok(OodSplit {
        train_view,
        test_view: g.clone(),
        removed_edges: removed,
        warnings,
    })
}

/// Mean and sample standard deviation (n−1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Shift summary for one metric: per-seed values under the in-distribution
/// and OOD conditions, their means and spreads, and the drop Δ.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub seeds: Vec<u64>,
    pub in_values: Vec<f64>,
    pub ood_values: Vec<f64>,
    pub mean_in: f64,
    pub std_in: f64,
    pub mean_ood: f64,
    pub std_ood: f64,
    /// `mean_in − mean_ood`.
    pub delta: f64,
    /// `100 · Δ / mean_in`; None when `mean_in` is 0.
    pub delta_pct: Option<f64>,
}

/// Builds the shift report from per-seed `(in, ood)` metric pairs.
pub fn report(metric: impl Into<String>, seeds: &[u64], pairs: &[(f64, f64)]) -> Result<EvalReport> {
    if pairs.is_empty() || seeds.len() != pairs.len() {
        return Err(Error::Contract(format!(
            "need one (in, ood) pair per seed: {} seeds, {} pairs",
            seeds.len(),
            pairs.len()
        )));
    }
    let in_values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ood_values: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (mean_in, std_in) = mean_std(&in_values);
    let (mean_ood, std_ood) = mean_std(&ood_values);
    let delta = mean_in - mean_ood;
    let delta_pct = (mean_in > 0.0).then(|| 100.0 * delta / mean_in);
    Ok(EvalReport {
        metric: metric.into(),
        seeds: seeds.to_vec(),
        in_values,
        ood_values,
        mean_in,
        std_in,
        mean_ood,
        std_ood,
        delta,
        delta_pct,
    })
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn text_table(&self) -> String {
        let pct = match self.delta_pct {
            Some(p) => format!("{p:.2}%"),
            None => "n/a".into(),
        };
        let mut out = String::new();
        out.push_str(&format!("metric      {}\n", self.metric));
        out.push_str(&format!(
            "in-dist     {:.4} +- {:.4}\n",
            self.mean_in, self.std_in
        ));
        out.push_str(&format!(
            "ood         {:.4} +- {:.4}\n",
            self.mean_ood, self.std_ood
        ));
        out.push_str(&format!("delta       {:.4} ({pct})\n", self.delta));
        out.push_str(&format!(
            "seeds       {}\n",
            self.seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(",")
        ));
        out
    }

    /// CSV with one row per seed plus a summary row.
    pub fn csv(&self) -> String {
        let mut out = String::from("seed,in_value,ood_value\n");
        for ((seed, a), b) in self.seeds.iter().zip(&self.in_values).zip(&self.ood_values) {
            out.push_str(&format!("{seed},{a:?},{b:?}\n"));
        }
        let pct = match self.delta_pct {
            Some(p) => format!("{p:.2}"),
            None => String::new(),
        };
        out.push_str(&format!(
            "summary,{:?},{:?}\n,delta,{:?}\n,delta_pct,{pct}\n",
            self.mean_in, self.mean_ood, self.delta
        ));
        out
    }
}

/// CSV dump of an `(x, y, std)` series for external plotting.
pub fn series_csv(header: &str, rows: &[(f64, f64, f64)]) -> String {
    let mut out = format!("{header}\n");
    for (x, y, s) in rows {
        out.push_str(&format!("{x:?},{y:?},{s:?}\n"));
    }
    out
}
