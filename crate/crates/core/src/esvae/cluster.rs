//! Structural uncertainty and cluster-based pseudo-labels: per-node
//! degree entropy, seeded k-means over time-averaged representations,
//! and the top-k uncertain clusters used as a supervision signal for the
//! dynamic environment factor.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::NodeRepresentationSequence;
use crate::graph::{DynamicGraph, Snapshot};
use crate::tensor::Mat;
use crate::{Error, Result};

/// Per-node first-order structural entropy contribution:
/// `-(d_v / vol) * log2(d_v / vol)`, zero for isolated nodes.
///
/// The total over nodes is the snapshot's structural entropy H1.
pub fn structural_entropy(snap: &Snapshot) -> Result<Vec<f64>> {
    let vol = snap.volume();
    if vol == 0 {
        return Err(Error::Domain(format!(
            "structural entropy undefined for empty snapshot t={}",
            snap.timestamp()
        )));
    }
    let vol = vol as f64;
    Ok((0..snap.node_count())
        .map(|v| {
            let d = snap.degree(v) as f64;
            if d == 0.0 {
                0.0
            } else {
                let p = d / vol;
                -p * p.log2()
            }
        })
        .collect())
}

/// K-means clustering of matrix rows with restarts; returns the
/// assignment of the best (lowest-inertia) run. Fully deterministic for
/// a given seed.
pub fn kmeans(data: &Mat, clusters: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    let n = data.nrows();
    if clusters == 0 || n < clusters {
        return Err(Error::Config(format!(
            "k-means needs at least as many rows ({n}) as clusters ({clusters})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let (inertia, assignment) = lloyd(data, clusters, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assignment));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn lloyd(data: &Mat, k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let n = data.nrows();
    let d = data.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut centers = Mat::zeros((k, d));
    for (c, &row) in order[..k].iter().enumerate() {
        centers.row_mut(c).assign(&data.row(row));
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for v in 0..n {
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let mut dist = 0.0;
                for j in 0..d {
                    let diff = data[(v, j)] - centers[(c, j)];
                    dist += diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best_c = c;
                }
            }
            if assignment[v] != best_c {
                assignment[v] = best_c;
                changed = true;
            }
        }

        let mut counts = vec![0usize; k];
        let mut sums = Mat::zeros((k, d));
        for v in 0..n {
            counts[assignment[v]] += 1;
            let mut row = sums.row_mut(assignment[v]);
            row += &data.row(v);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an emptied cluster on the point farthest from
                // its current center so every cluster stays populated.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = row_dist(data, a, &centers, assignment[a]);
                        let db = row_dist(data, b, &centers, assignment[b]);
                        da.total_cmp(&db)
                    })
                    .expect("nonempty data");
                centers.row_mut(c).assign(&data.row(far));
                assignment[far] = c;
                changed = true;
            } else {
                for j in 0..d {
                    centers[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let inertia: f64 = (0..n)
        .map(|v| row_dist(data, v, &centers, assignment[v]))
        .sum();
    (inertia, assignment)
}

fn row_dist(data: &Mat, v: usize, centers: &Mat, c: usize) -> f64 {
    let mut dist = 0.0;
    for j in 0..data.ncols() {
        let diff = data[(v, j)] - centers[(c, j)];
        dist += diff * diff;
    }
    dist
}

/// Cluster assignment plus the per-timestamp top-k uncertain clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelTask {
    /// Node -> cluster id in `0..clusters`.
    pub assignment: Vec<usize>,
    pub clusters: usize,
    pub top_k: usize,
    /// Per timestamp (index t-1): the k cluster ids with the largest mean
    /// structural entropy, sorted ascending.
    pub labels: Vec<Vec<usize>>,
}

impl PseudoLabelTask {
    /// k-hot target matrix, `T x clusters`.
    pub fn khot_targets(&self) -> Mat {
        let mut out = Mat::zeros((self.labels.len(), self.clusters));
        for (t, label) in self.labels.iter().enumerate() {
            for &c in label {
                out[(t, c)] = 1.0;
            }
        }
        out
    }

    /// Text table `v cluster`, one node per line.
    pub fn assignment_table(&self) -> String {
        let mut out = String::new();
        for (v, c) in self.assignment.iter().enumerate() {
            let _ = writeln!(out, "{v} {c}");
        }
        out
    }
}

/// Cluster nodes on their time-averaged representations and label each
/// timestamp with the `top_k` clusters of highest mean structural
/// entropy (ties resolved toward the lower cluster index).
pub fn cluster_pseudo_labels(
    g: &DynamicGraph,
    h: &NodeRepresentationSequence,
    clusters: usize,
    top_k: usize,
    seed: u64,
) -> Result<PseudoLabelTask> {
    if h.node_count() < clusters {
        return Err(Error::Config(format!(
            "{} nodes cannot form {clusters} clusters",
            h.node_count()
        )));
    }
    if top_k > clusters {
        return Err(Error::Config(format!(
            "top_k ({top_k}) exceeds cluster count ({clusters})"
        )));
    }
    let assignment = kmeans(&h.time_mean(), clusters, 10, seed)?;

    let mut labels = Vec::with_capacity(g.len());
    for snap in g.snapshots() {
        let se = structural_entropy(snap)?;
        let mut sums = vec![0.0; clusters];
        let mut counts = vec![0usize; clusters];
        for (v, &c) in assignment.iter().enumerate() {
            sums[c] += se[v];
            counts[c] += 1;
        }
        let mut ranked: Vec<usize> = (0..clusters).collect();
        ranked.sort_by(|&a, &b| {
            let ma = if counts[a] == 0 { 0.0 } else { sums[a] / counts[a] as f64 };
            let mb = if counts[b] == 0 { 0.0 } else { sums[b] / counts[b] as f64 };
            mb.total_cmp(&ma).then(a.cmp(&b))
        });
        let mut top: Vec<usize> = ranked[..top_k].to_vec();
        top.sort_unstable();
        labels.push(top);
    }
    Ok(PseudoLabelTask {
        assignment,
        clusters,
        top_k,
        labels,
    })
}
