//! Spatio-temporal encoder: time-aware feature projection, multi-head
//! graph attention over each snapshot, and causal running-mean temporal
//! aggregation.
//!
//! Per timestamp t, features are lifted with a fixed sinusoidal time
//! encoding added element-wise before projection: `z = act(W1' (x + rte(t)) + b)`.
//! Each of the L layers then applies additive multi-head attention over
//! the snapshot's edges (residual + softmax-normalized neighbor sum) and
//! replaces every timestamp with the running mean of all timestamps up
//! to it, so the representation at t never sees snapshots after t.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{DynamicGraph, Snapshot};
use crate::tensor::{BoundParams, Mat, ParamStore, Tape, Tid};
use crate::{Error, Result};

/// Activation applied to the projected features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Hyperparameters of the encoder.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Input feature dimension d; the time encoding shares it.
    pub input_dim: usize,
    /// Representation dimension d'.
    pub hidden_dim: usize,
    /// Number of attention + temporal-mean layers L.
    pub layers: usize,
    /// Attention heads; must divide `hidden_dim`.
    pub attention_heads: usize,
    /// Projection activation.
    pub activation: Activation,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            layers: 2,
            attention_heads: 4,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.attention_heads == 0 || self.hidden_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "attention heads ({}) must divide hidden_dim ({})",
                self.attention_heads, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.attention_heads
    }

    /// Short description recorded with every representation sequence.
    pub fn fingerprint(&self) -> String {
        format!(
            "encoder d={} d'={} L={} heads={} act={:?} seed={}",
            self.input_dim, self.hidden_dim, self.layers, self.attention_heads,
            self.activation, self.seed
        )
    }
}

/// Fixed sinusoidal encoding of an integer timestamp at dimension `d`.
///
/// Deterministic and non-learned: even dimensions carry
/// `sin(t / 10000^(i/d))`, odd ones the matching cosine.
pub fn rte(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (i, slot) in out.iter_mut().enumerate() {
        let pair = (i / 2 * 2) as f64;
        let rate = (t as f64) / 10_000f64.powf(pair / d as f64);
        *slot = if i % 2 == 0 { rate.sin() } else { rate.cos() };
    }
    out
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Mat {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Seeded initialization of all encoder parameters (names prefixed `enc.`).
pub fn init_params(cfg: &EncoderConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    params.insert(
        "enc.w1",
        glorot(&mut rng, cfg.input_dim, cfg.hidden_dim, cfg.input_dim, cfg.hidden_dim),
    );
    params.insert("enc.b1", Mat::zeros((1, cfg.hidden_dim)));
    let hd = cfg.head_dim();
    for l in 0..cfg.layers {
        // Additive attention scores concatenate source and destination
        // blocks, so fan-in is 2 * head_dim.
        params.insert(
            format!("enc.l{l}.att_src"),
            glorot(&mut rng, cfg.attention_heads, hd, 2 * hd, 1),
        );
        params.insert(
            format!("enc.l{l}.att_dst"),
            glorot(&mut rng, cfg.attention_heads, hd, 2 * hd, 1),
        );
    }
    Ok(params)
}

/// Negative slope of the attention score nonlinearity.
const ATTENTION_SLOPE: f64 = 0.2;

/// Per-node, per-timestamp representations (`T` matrices of `N x d'`).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRepresentationSequence {
    values: Vec<Mat>,
    produced_by: String,
}

impl NodeRepresentationSequence {
    pub fn new(values: Vec<Mat>, produced_by: String) -> Self {
        Self { values, produced_by }
    }

    pub fn node_count(&self) -> usize {
        self.values.first().map_or(0, Mat::nrows)
    }

    /// Number of timestamps T.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Mat::ncols)
    }

    pub fn produced_by(&self) -> &str {
        &self.produced_by
    }

    /// Representations at 1-based timestamp `t`.
    pub fn at(&self, t: usize) -> &Mat {
        &self.values[t - 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mat> {
        self.values.iter()
    }

    /// One node's history as a `T x d'` matrix.
    pub fn node_history(&self, v: usize) -> Mat {
        let mut out = Mat::zeros((self.values.len(), self.dim()));
        for (t, m) in self.values.iter().enumerate() {
            out.row_mut(t).assign(&m.row(v));
        }
        out
    }

    /// Time-averaged representations, `N x d'`.
    pub fn time_mean(&self) -> Mat {
        let mut out = Mat::zeros((self.node_count(), self.dim()));
        for m in &self.values {
            out += m;
        }
        out / self.values.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

/// Directed expansion of a snapshot's undirected edges: `(src, dst)` both
/// ways, so attention aggregates each node's full neighborhood.
fn directed_edges(snap: &Snapshot) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(snap.edge_count() * 2);
    let mut dst = Vec::with_capacity(snap.edge_count() * 2);
    for &(u, v) in snap.edges() {
        src.push(u);
        dst.push(v);
        src.push(v);
        dst.push(u);
    }
    (src, dst)
}

/// One multi-head attention layer on the tape: residual plus
/// softmax-weighted neighbor sum (weights normalized per destination).
pub fn spatial_attention_on_tape(
    tape: &mut Tape,
    z: Tid,
    snap: &Snapshot,
    att_src: Tid,
    att_dst: Tid,
) -> Tid {
    if snap.edge_count() == 0 {
        return z;
    }
    let n = snap.node_count();
    let (src, dst) = directed_edges(snap);
    let zu = tape.gather_rows(z, src);
    let zv = tape.gather_rows(z, dst.clone());
    let s_src = tape.head_block_dot(zu, att_src);
    let s_dst = tape.head_block_dot(zv, att_dst);
    let scores = tape.add(s_src, s_dst);
    let scores = tape.leaky_relu(scores, ATTENTION_SLOPE);
    let weights = tape.segment_softmax(scores, dst.clone());
    let messages = tape.mul_head_blocks(zu, weights);
    let pooled = tape.scatter_add_rows(messages, dst, n);
    tape.add(z, pooled)
}

/// Attention coefficients of one layer, for inspection: rows follow
/// [`directed_edges`] order, one column per head.
pub fn attention_coefficients(
    z: &Mat,
    snap: &Snapshot,
    att_src: &Mat,
    att_dst: &Mat,
) -> (Vec<(usize, usize)>, Mat) {
    let mut tape = Tape::new();
    let z = tape.constant(z.clone());
    let a_src = tape.constant(att_src.clone());
    let a_dst = tape.constant(att_dst.clone());
    let (src, dst) = directed_edges(snap);
    let pairs: Vec<(usize, usize)> = src.iter().copied().zip(dst.iter().copied()).collect();
    if pairs.is_empty() {
        return (pairs, Mat::zeros((0, att_src.nrows())));
    }
    let zu = tape.gather_rows(z, src);
    let zv = tape.gather_rows(z, dst.clone());
    let s_src = tape.head_block_dot(zu, a_src);
    let s_dst = tape.head_block_dot(zv, a_dst);
    let scores = tape.add(s_src, s_dst);
    let scores = tape.leaky_relu(scores, ATTENTION_SLOPE);
    let weights = tape.segment_softmax(scores, dst);
    (pairs, tape.value(weights).clone())
}

/// Full forward pass on an existing tape; returns the `N x d'` node
/// representations for every timestamp (1-based index - 1).
pub fn encode_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    g: &DynamicGraph,
    cfg: &EncoderConfig,
) -> Result<Vec<Tid>> {
    cfg.validate()?;
    if g.feature_dim() != cfg.input_dim {
        return Err(Error::Config(format!(
            "graph feature dim {} does not match encoder input dim {}",
            g.feature_dim(),
            cfg.input_dim
        )));
    }
    let w1 = bound.id("enc.w1");
    let b1 = bound.id("enc.b1");

    // Projection with the time encoding folded into the features.
    let mut z: Vec<Tid> = Vec::with_capacity(g.len());
    for snap in g.snapshots() {
        let r = rte(snap.timestamp(), cfg.input_dim);
        let mut shifted = snap.features().clone();
        for mut row in shifted.outer_iter_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x += r[j];
            }
        }
        let x = tape.constant(shifted);
        let affine = tape.matmul(x, w1);
        let affine = tape.add_row(affine, b1);
        let projected = match cfg.activation {
            Activation::Relu => tape.relu(affine),
            Activation::Identity => affine,
        };
        z.push(projected);
    }

    // L rounds of spatial attention followed by causal running means.
    for l in 0..cfg.layers {
        let att_src = bound.id(&format!("enc.l{l}.att_src"));
        let att_dst = bound.id(&format!("enc.l{l}.att_dst"));
        let spatial: Vec<Tid> = z
            .iter()
            .zip(g.snapshots())
            .map(|(&zt, snap)| spatial_attention_on_tape(tape, zt, snap, att_src, att_dst))
            .collect();
        let mut aggregated = Vec::with_capacity(spatial.len());
        let mut running: Option<Tid> = None;
        for (idx, &zt) in spatial.iter().enumerate() {
            let sum = match running {
                Some(prev) => tape.add(prev, zt),
                None => zt,
            };
            running = Some(sum);
            aggregated.push(tape.scale(sum, 1.0 / (idx + 1) as f64));
        }
        z = aggregated;
    }
    Ok(z)
}

/// Value-level encoding: builds a private tape and materializes H.
pub fn encode(
    g: &DynamicGraph,
    cfg: &EncoderConfig,
    params: &ParamStore,
) -> Result<NodeRepresentationSequence> {
    g.ensure_valid()?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let ids = encode_on_tape(&mut tape, &bound, g, cfg)?;
    let mut values = Vec::with_capacity(ids.len());
    for (idx, id) in ids.iter().enumerate() {
        let m = tape.value(*id);
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite representation at timestamp {}",
                idx + 1
            )));
        }
        values.push(m.clone());
    }
    Ok(NodeRepresentationSequence::new(values, cfg.fingerprint()))
}

/// Project a single feature vector at timestamp `t` through the
/// time-shifted input layer, without building a tape.
pub fn project_features(
    x: &[f64],
    t: usize,
    cfg: &EncoderConfig,
    params: &ParamStore,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x.len() != cfg.input_dim {
        return Err(Error::Config(format!(
            "feature vector has dim {}, encoder expects {}",
            x.len(),
            cfg.input_dim
        )));
    }
    let r = rte(t, cfg.input_dim);
    let shifted = Mat::from_shape_fn((1, x.len()), |(_, j)| x[j] + r[j]);
    let mut tape = Tape::new();
    let xs = tape.constant(shifted);
    let w1 = tape.constant(params.get("enc.w1").clone());
    let b1 = tape.constant(params.get("enc.b1").clone());
    let affine = tape.matmul(xs, w1);
    let affine = tape.add_row(affine, b1);
    let out = match cfg.activation {
        Activation::Relu => tape.relu(affine),
        Activation::Identity => affine,
    };
    Ok(tape.value(out).row(0).to_vec())
}

/// Value-level single attention layer, without building a tape.
pub fn spatial_attention_layer(
    z: &Mat,
    snap: &Snapshot,
    att_src: &Mat,
    att_dst: &Mat,
) -> Result<Mat> {
    if z.nrows() != snap.node_count() {
        return Err(Error::Contract(format!(
            "representation rows {} != snapshot nodes {}",
            z.nrows(),
            snap.node_count()
        )));
    }
    let mut tape = Tape::new();
    let zt = tape.constant(z.clone());
    let a_src = tape.constant(att_src.clone());
    let a_dst = tape.constant(att_dst.clone());
    let out = spatial_attention_on_tape(&mut tape, zt, snap, a_src, a_dst);
    Ok(tape.value(out).clone())
}

/// Causal running mean over per-timestamp matrices.
pub fn temporal_aggregate(z_hat: &[Mat]) -> Vec<Mat> {
    let mut out = Vec::with_capacity(z_hat.len());
    let mut running: Option<Mat> = None;
    for (idx, z) in z_hat.iter().enumerate() {
        let sum = match running.take() {
            Some(prev) => prev + z,
            None => z.clone(),
        };
        out.push(&sum / (idx + 1) as f64);
        running = Some(sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TaskKind;
    use crate::tensor::default_gradient_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_graph(n: usize, t_count: usize, d: usize, seed: u64) -> DynamicGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snaps = (1..=t_count)
            .map(|t| {
                let mut edges = Vec::new();
                for u in 0..n {
                    for v in (u + 1)..n {
                        if rng.gen_bool(0.4) {
                            edges.push((u, v));
                        }
                    }
                }
                let feats = Mat::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
                Snapshot::new(t, n, edges, feats)
            })
            .collect();
        DynamicGraph::new(n, d, snaps, TaskKind::Link, None)
    }

    fn small_cfg(d: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim: d,
            hidden_dim: 8,
            layers: 2,
            attention_heads: 2,
            activation: Activation::Relu,
            seed: 11,
        }
    }

    #[test]
    fn rte_is_deterministic_and_bounded() {
        let a = rte(3, 6);
        let b = rte(3, 6);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.abs() <= 1.0));
        assert_ne!(rte(3, 6), rte(4, 6));
        // Odd dims are cosines: at t = 0 they equal 1, evens are 0.
        let zero = rte(0, 4);
        assert_eq!(zero, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn projection_reduces_to_time_encoding_on_zero_input() {
        // Identity W1 (d = d'), zero bias, identity activation: projecting
        // a zero vector returns rte(t) itself.
        let d = 4;
        let cfg = EncoderConfig {
            input_dim: d,
            hidden_dim: d,
            layers: 1,
            attention_heads: 1,
            activation: Activation::Identity,
            seed: 0,
        };
        let mut params = ParamStore::new();
        params.insert("enc.w1", Mat::eye(d));
        params.insert("enc.b1", Mat::zeros((1, d)));
        let out = project_features(&vec![0.0; d], 5, &cfg, &params).unwrap();
        assert_eq!(out, rte(5, d));
    }

    #[test]
    fn projection_rejects_dimension_mismatch() {
        let cfg = small_cfg(4);
        let params = init_params(&cfg).unwrap();
        let err = project_features(&[0.0; 3], 1, &cfg, &params).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn isolated_and_singleton_neighborhoods() {
        // Nodes: 0-1 connected, 2 isolated.
        let snap = Snapshot::new(1, 3, vec![(0, 1)], Mat::zeros((3, 1)));
        let z = Mat::from_shape_vec((3, 4), (0..12).map(f64::from).collect()).unwrap();
        let att = Mat::from_elem((2, 2), 0.3);
        let out = spatial_attention_layer(&z, &snap, &att, &att).unwrap();
        // Isolated node keeps its representation.
        assert_eq!(out.row(2), z.row(2));
        // Single neighbor: softmax over one edge is 1, so out = z_v + z_u.
        for j in 0..4 {
            assert!((out[(0, j)] - (z[(0, j)] + z[(1, j)])).abs() < 1e-12);
            assert!((out[(1, j)] - (z[(1, j)] + z[(0, j)])).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_twin_neighbors_split_attention_evenly() {
        // Node 0 has neighbors 1 and 2 carrying identical embeddings.
        let snap = Snapshot::new(1, 3, vec![(0, 1), (0, 2)], Mat::zeros((3, 1)));
        let mut z = Mat::zeros((3, 4));
        for j in 0..4 {
            z[(0, j)] = 0.1 * j as f64;
            z[(1, j)] = 1.0 + j as f64;
            z[(2, j)] = 1.0 + j as f64;
        }
        let att_src = Mat::from_elem((2, 2), 0.7);
        let att_dst = Mat::from_elem((2, 2), -0.4);
        let (pairs, w) = attention_coefficients(&z, &snap, &att_src, &att_dst);
        for (k, &(u, v)) in pairs.iter().enumerate() {
            if v == 0 {
                assert!(u == 1 || u == 2);
                for h in 0..2 {
                    assert!((w[(k, h)] - 0.5).abs() < 1e-12);
                }
            }
        }
        let out = spatial_attention_layer(&z, &snap, &att_src, &att_dst).unwrap();
        for j in 0..4 {
            assert!((out[(0, j)] - (z[(0, j)] + z[(1, j)])).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_weights_sum_to_one_per_destination() {
        let g = random_graph(7, 1, 3, 5);
        let cfg = small_cfg(3);
        let params = init_params(&cfg).unwrap();
        let z = Mat::from_shape_fn((7, 8), |(i, j)| ((i * 13 + j * 7) % 11) as f64 / 11.0);
        let snap = g.snapshot(1).unwrap();
        let (pairs, w) = attention_coefficients(
            &z,
            snap,
            params.get("enc.l0.att_src"),
            params.get("enc.l0.att_dst"),
        );
        for v in 0..7 {
            if snap.degree(v) == 0 {
                continue;
            }
            for h in 0..cfg.attention_heads {
                let sum: f64 = pairs
                    .iter()
                    .enumerate()
                    .filter(|(_, &(_, dst))| dst == v)
                    .map(|(k, _)| w[(k, h)])
                    .sum();
                assert!((sum - 1.0).abs() < 1e-6, "node {v} head {h}: {sum}");
            }
        }
    }

    #[test]
    fn temporal_aggregate_matches_hand_values() {
        let z1 = Mat::from_shape_vec((1, 2), vec![2.0, 0.0]).unwrap();
        let z2 = Mat::from_shape_vec((1, 2), vec![0.0, 2.0]).unwrap();
        let out = temporal_aggregate(&[z1.clone(), z2]);
        assert_eq!(out[0], z1);
        assert_eq!(out[1], Mat::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap());

        // Constant input stays constant (up to the rounding of sum/t).
        let c = Mat::from_elem((2, 2), 0.7);
        let out = temporal_aggregate(&[c.clone(), c.clone(), c.clone()]);
        for m in out {
            for (a, b) in m.iter().zip(c.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encode_is_causal_bit_exactly() {
        let g = random_graph(6, 4, 3, 21);
        let cfg = small_cfg(3);
        let params = init_params(&cfg).unwrap();
        let full = encode(&g, &cfg, &params).unwrap();
        for t in 1..=3 {
            let prefix = encode(&g.prefix(t), &cfg, &params).unwrap();
            for tau in 1..=t {
                assert_eq!(full.at(tau), prefix.at(tau), "prefix {t}, timestamp {tau}");
            }
        }
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let g = random_graph(6, 3, 3, 33);
        let cfg = small_cfg(3);
        let params = init_params(&cfg).unwrap();
        let h = encode(&g, &cfg, &params).unwrap();

        // Permute node indices.
        let perm: Vec<usize> = vec![3, 5, 0, 2, 4, 1];
        let snaps = g
            .snapshots()
            .iter()
            .map(|s| {
                let edges = s
                    .edges()
                    .iter()
                    .map(|&(u, v)| (perm[u], perm[v]))
                    .collect();
                let mut feats = Mat::zeros((6, 3));
                for v in 0..6 {
                    feats.row_mut(perm[v]).assign(&s.features().row(v));
                }
                Snapshot::new(s.timestamp(), 6, edges, feats)
            })
            .collect();
        let pg = DynamicGraph::new(6, 3, snaps, TaskKind::Link, None);
        let ph = encode(&pg, &cfg, &params).unwrap();
        for t in 1..=3 {
            for v in 0..6 {
                for j in 0..cfg.hidden_dim {
                    let a = h.at(t)[(v, j)];
                    let b = ph.at(t)[(perm[v], j)];
                    assert!((a - b).abs() < 1e-5, "t={t} v={v} j={j}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn edgeless_graph_encodes_to_projected_running_means() {
        let n = 4;
        let d = 3;
        let mut cfg = small_cfg(d);
        cfg.layers = 1;
        let params = init_params(&cfg).unwrap();
        let g = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let snaps = (1..=3)
                .map(|t| {
                    let feats = Mat::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
                    Snapshot::new(t, n, vec![], feats)
                })
                .collect();
            DynamicGraph::new(n, d, snaps, TaskKind::Link, None)
        };
        let h = encode(&g, &cfg, &params).unwrap();

        // With no edges a layer is the temporal mean of the projections.
        let projected: Vec<Mat> = g
            .snapshots()
            .iter()
            .map(|s| {
                let mut rows = Vec::new();
                for v in 0..n {
                    let x: Vec<f64> = s.features().row(v).to_vec();
                    rows.push(project_features(&x, s.timestamp(), &cfg, &params).unwrap());
                }
                Mat::from_shape_fn((n, cfg.hidden_dim), |(i, j)| rows[i][j])
            })
            .collect();
        let expect = temporal_aggregate(&projected);
        for t in 1..=3 {
            for v in 0..n {
                for j in 0..cfg.hidden_dim {
                    assert!((h.at(t)[(v, j)] - expect[t - 1][(v, j)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn encode_gradients_match_finite_differences() {
        let g = random_graph(5, 3, 3, 77);
        let cfg = small_cfg(3);
        let params = init_params(&cfg).unwrap();
        let readout = Mat::from_shape_fn((5, 8), |(i, j)| ((i + 2 * j) % 5) as f64 / 5.0 - 0.4);
        let report = default_gradient_check(&params, |tape, bound| {
            let hs = encode_on_tape(tape, bound, &g, &cfg).unwrap();
            let w = tape.constant(readout.clone());
            let mut total = None;
            for h in hs {
                let weighted = tape.mul(h, w);
                let s = tape.sum_all(weighted);
                total = Some(match total {
                    Some(acc) => tape.add(acc, s),
                    None => s,
                });
            }
            total.unwrap()
        });
        assert!(
            report.within(1e-3),
            "worst {} at {:?}: analytic {} vs numeric {}",
            report.worst_param,
            report.worst_index,
            report.analytic,
            report.numeric
        );
    }

    #[test]
    fn mismatched_feature_dim_is_config_error() {
        let g = random_graph(4, 2, 5, 1);
        let cfg = small_cfg(3);
        let params = init_params(&cfg).unwrap();
        assert!(matches!(encode(&g, &cfg, &params), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation_catches_bad_heads() {
        let mut cfg = small_cfg(3);
        cfg.attention_heads = 3; // does not divide 8
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn running_mean_lies_in_convex_hull(seed in any::<u64>(), t_count in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let zs: Vec<Mat> = (0..t_count)
                .map(|_| Mat::from_shape_fn((3, 2), |_| rng.gen_range(-5.0..5.0)))
                .collect();
            let out = temporal_aggregate(&zs);
            for (t, h) in out.iter().enumerate() {
                for v in 0..3 {
                    for j in 0..2 {
                        let lo = zs[..=t].iter().map(|z| z[(v, j)]).fold(f64::INFINITY, f64::min);
                        let hi = zs[..=t].iter().map(|z| z[(v, j)]).fold(f64::NEG_INFINITY, f64::max);
                        prop_assert!(h[(v, j)] >= lo - 1e-9 && h[(v, j)] <= hi + 1e-9);
                    }
                }
            }
        }
    }
}
