//! Synthetic dynamic-graph generators for distribution-shift studies.
//!
//! Three protocols are provided: a stochastic block model for node
//! classification whose spurious block affinities are controlled by a
//! shift level and vanish in the test snapshots; a feature-shift
//! transform that factorizes sampled future links into spuriously
//! correlated node features; and environment suites where features are
//! driven by hidden factors, with knobs for the fraction of reliable
//! invariant environments (stationary) and the dynamic mixing level
//! (non-stationary).
//!
//! Generators are pure functions of `(spec, seed)`: identical inputs
//! reproduce bit-identical datasets. Every generated edge carries a
//! provenance tag in an [`EdgeTags`] sidecar so out-of-distribution
//! filters can be audited.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::evaluation::EdgeTags;
use crate::graph::{ClassLabel, DynamicGraph, LabelSet, LinkLabel, Snapshot, TaskKind, TemporalSplit};
use crate::tensor::Mat;
use crate::{Error, Result};

/// Mixture weight of the label-correlated (invariant) edge component.
pub const SBM_INVARIANT_WEIGHT: f64 = 0.7;
/// Mixture weight of the shift-controlled (variant) edge component.
pub const SBM_VARIANT_WEIGHT: f64 = 0.3;
/// Entry scale of the noise initialization used by the link factorizer.
pub const FACTORIZE_INIT_SCALE: f64 = 3.0;
/// Relative loss-change threshold that stops the link factorizer.
pub const FACTORIZE_REL_TOL: f64 = 1e-4;

/// Declared temporal split for generated datasets: the last two
/// timestamps are held out (one validation, the rest test).
fn declared_split(t_len: usize, test_len: usize) -> TemporalSplit {
    TemporalSplit {
        train: (1, t_len - test_len - 1),
        val: (t_len - test_len, t_len - test_len),
        test: (t_len - test_len + 1, t_len),
    }
}

// ---------------------------------------------------------------------
// Stochastic block model with a shift-level-controlled variant factor.
// ---------------------------------------------------------------------

/// Parameters of the block-model node-classification generator.
#[derive(Debug, Clone)]
pub struct SbmSpec {
    pub num_nodes: usize,
    pub t_len: usize,
    pub classes: usize,
    /// Same-class edge probability of the invariant component.
    pub intra: f64,
    /// Cross-class edge probability of the invariant component.
    pub inter: f64,
    /// Strength of the spurious variant component in [0, 1]. Train and
    /// validation snapshots use this value; test snapshots use 0.
    pub shift_level: f64,
    /// Node feature dimension.
    pub feature_dim: usize,
    /// Magnitude of the class signal planted in the features.
    pub feature_signal: f64,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            num_nodes: 500,
            t_len: 8,
            classes: 3,
            intra: 0.05,
            inter: 0.005,
            shift_level: 0.0,
            feature_dim: 8,
            feature_signal: 1.0,
            seed: 0,
        }
    }
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("intra", self.intra), ("inter", self.inter)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{name} probability must lie in [0, 1], got {p}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.shift_level) {
            return Err(Error::Config(format!(
                "shift level must lie in [0, 1], got {}",
                self.shift_level
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.num_nodes < self.classes {
            return Err(Error::Config(format!(
                "{} nodes cannot host {} classes",
                self.num_nodes, self.classes
            )));
        }
        if self.t_len < 5 {
            return Err(Error::Config(format!(
                "need at least 5 timestamps for a train/val/test split, got {}",
                self.t_len
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        Ok(())
    }
}

/// A generated block-model dataset with its declared split and the
/// per-edge provenance sidecar.
#[derive(Debug, Clone)]
pub struct SbmDataset {
    pub graph: DynamicGraph,
    pub split: TemporalSplit,
    /// Per edge: `corr:a-b` when the invariant component fired, `var:a-b`
    /// when the variant one did (`a`, `b` are 1-based class ids).
    pub tags: EdgeTags,
    /// Spurious class-affinity matrix used for train/val snapshots:
    /// `affinity[a][b]` marks the class pairs whose variant probability
    /// is elevated by the shift level.
    pub affinity: Vec<Vec<bool>>,
    /// Number of edge probabilities that had to be clipped into [0, 1].
    pub clipped: usize,
}

/// Symmetric random class-affinity matrix: the diagonal is always
/// elevated, off-diagonal pairs independently with probability 1/2.
fn draw_affinity(classes: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let mut m = vec![vec![false; classes]; classes];
    for a in 0..classes {
        m[a][a] = true;
        for b in (a + 1)..classes {
            let bit = rng.gen_bool(0.5);
            m[a][b] = bit;
            m[b][a] = bit;
        }
    }
    m
}

/// Generates the node-classification block model.
///
/// Per snapshot, an edge between `u` and `v` fires from a two-component
/// mixture: with weight [`SBM_INVARIANT_WEIGHT`] the invariant component
/// (`intra` for same-class pairs, `inter` otherwise — its correlation
/// with labels never changes), and with weight [`SBM_VARIANT_WEIGHT`]
/// the variant component, whose probability is raised from `inter`
/// toward `intra` in proportion to the shift level on the class pairs
/// picked by a per-split random affinity. Test snapshots are generated
/// at shift level 0, so the spurious affinities vanish there. Labels are
/// round-robin (`class(v) = v mod C`) and constant over time.
pub fn gen_sbm_node_cls(spec: &SbmSpec) -> Result<SbmDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_nodes;
    let c_of = |v: usize| v % spec.classes;
    let split = declared_split(spec.t_len, 2);

    // Constant per-node features: weak class signal plus unit noise.
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut features = Mat::zeros((n, spec.feature_dim));
    for v in 0..n {
        let c = c_of(v);
        for j in 0..spec.feature_dim {
            let signal = if j % spec.classes == c {
                spec.feature_signal
            } else {
                0.0
            };
            features[(v, j)] = signal + noise.sample(&mut rng);
        }
    }

    let trainval_affinity = draw_affinity(spec.classes, &mut rng);
    let test_affinity = draw_affinity(spec.classes, &mut rng);

    let mut tags = EdgeTags::new();
    let mut clipped = 0usize;
    let mut snapshots = Vec::with_capacity(spec.t_len);
    for t in 1..=spec.t_len {
        let in_trainval = t <= split.val.1;
        let shift = if in_trainval { spec.shift_level } else { 0.0 };
        let affinity = if in_trainval {
            &trainval_affinity
        } else {
            &test_affinity
        };
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                let (cu, cv) = (c_of(u), c_of(v));
                let p_corr = if cu == cv { spec.intra } else { spec.inter };
                let mut p_var = spec.inter
                    + if affinity[cu][cv] {
                        shift * (spec.intra - spec.inter)
                    } else {
                        0.0
                    };
                if !(0.0..=1.0).contains(&p_var) {
                    p_var = p_var.clamp(0.0, 1.0);
                    clipped += 1;
                }
                let from_invariant = rng.gen_bool(SBM_INVARIANT_WEIGHT);
                let p = if from_invariant { p_corr } else { p_var };
                if rng.gen_bool(p) {
                    edges.push((u, v));
                    let kind = if from_invariant { "corr" } else { "var" };
                    tags.insert(t, u, v, format!("{kind}:{}-{}", cu.min(cv) + 1, cu.max(cv) + 1));
                }
            }
        }
        snapshots.push(Snapshot::new(t, n, edges, features.clone()));
    }

    let labels = (1..=spec.t_len)
        .flat_map(|t| {
            (0..n).map(move |v| ClassLabel {
                v,
                t,
                class: c_of(v) + 1,
            })
        })
        .collect();
    let graph = DynamicGraph::new(
        n,
        spec.feature_dim,
        snapshots,
        TaskKind::NodeClass,
        Some(LabelSet::NodeClass(labels)),
    );
    graph.ensure_valid()?;
    Ok(SbmDataset {
        graph,
        split,
        tags,
        affinity: trainval_affinity,
        clipped,
    })
}

// ---------------------------------------------------------------------
// Feature-shift transform via logistic link factorization.
// ---------------------------------------------------------------------

/// Parameters of the feature-shift transform.
#[derive(Debug, Clone)]
pub struct FeatureShiftSpec {
    /// Baseline sampling probability p̄ for future links.
    pub p_bar: f64,
    /// Cosine amplitude: `p(t) = clip(p̄ + σ·cos t)`.
    pub sigma: f64,
    /// Dimension of the synthetic factorized features.
    pub dim: usize,
    /// Iteration cap of the factorizer.
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for FeatureShiftSpec {
    fn default() -> Self {
        Self {
            p_bar: 0.4,
            sigma: 0.1,
            dim: 16,
            max_iters: 500,
            seed: 0,
        }
    }
}

impl FeatureShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_bar) {
            return Err(Error::Config(format!(
                "p_bar must lie in [0, 1], got {}",
                self.p_bar
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config(format!(
                "sigma must be nonnegative, got {}",
                self.sigma
            )));
        }
        if self.dim == 0 || self.max_iters == 0 {
            return Err(Error::Config(
                "factorization dim and iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fit diagnostics from [`factorize_links`].
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizeReport {
    /// Frobenius norm of the noise initialization.
    pub init_norm: f64,
    /// Frobenius norm of the fitted factors.
    pub final_norm: f64,
    pub final_loss: f64,
    pub iters: usize,
}

/// Factorizes an undirected edge set into node factors `X` by gradient
/// descent on the logistic reconstruction cross-entropy of `X Xᵀ`
/// against the adjacency matrix (all `n²` entries, diagonal included).
/// Stops when the relative loss change drops below
/// [`FACTORIZE_REL_TOL`] or at the iteration cap.
pub fn factorize_links(
    n: usize,
    edges: &[(usize, usize)],
    dim: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Mat, FactorizeReport)> {
    if n == 0 || dim == 0 || max_iters == 0 {
        return Err(Error::Config(
            "factorization needs nodes, a positive dim and a positive cap".into(),
        ));
    }
    let mut a = Mat::zeros((n, n));
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::Contract(format!(
                "edge ({u}, {v}) outside {n} nodes"
            )));
        }
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, FACTORIZE_INIT_SCALE).expect("valid normal");
    let mut x = Mat::from_shape_fn((n, dim), |_| noise.sample(&mut rng));
    let init_norm = frobenius(&x);

    // The symmetric product contributes each pair twice, so the factor-2
    // gradient with a 1/n rate steps the dominant (mean) mode by exactly
    // its eigenvalue — larger rates oscillate instead of contracting.
    let lr = 1.0 / n as f64;
    let mut prev_loss = f64::INFINITY;
    let mut loss = prev_loss;
    let mut iters = 0;
    for k in 1..=max_iters {
        iters = k;
        let s = x.dot(&x.t());
        let p = s.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        loss = s
            .iter()
            .zip(a.iter())
            .map(|(&sij, &aij)| softplus(sij) - aij * sij)
            .sum();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "link factorization diverged at iteration {k}"
            )));
        }
        if k > 1 && (prev_loss - loss).abs() / prev_loss.abs().max(1e-12) < FACTORIZE_REL_TOL {
            break;
        }
        prev_loss = loss;
        let grad = (&p - &a).dot(&x) * 2.0;
        x = x - grad * lr;
    }
    let report = FactorizeReport {
        init_norm,
        final_norm: frobenius(&x),
        final_loss: loss,
        iters,
    };
    Ok((x, report))
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn frobenius(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Output of the feature-shift transform.
#[derive(Debug, Clone)]
pub struct FeatureShiftOut {
    /// One snapshot fewer than the base graph; features are the base
    /// features with the factorized columns appended; structure and
    /// labels are unchanged.
    pub graph: DynamicGraph,
    /// Edges of each lookahead snapshot tagged `sampled` or `base`.
    pub tags: EdgeTags,
    /// Effective sampling probability per timestamp (after clipping).
    pub sample_prob: Vec<f64>,
    /// Number of timestamps whose p(t) needed clipping into [0, 1].
    pub clipped: usize,
    pub reports: Vec<FactorizeReport>,
}

/// Augments a base graph with spuriously correlated synthetic features.
///
/// For each timestamp `t` up to `T − 1`, future links are sampled from
/// snapshot `t + 1` with probability `p(t) = clip(p̄ + σ·cos t)` and
/// factorized into synthetic features that are appended to the original
/// ones. A larger `p(t)` plants stronger spurious correlations with the
/// next snapshot's environment.
pub fn gen_feature_shift(base: &DynamicGraph, spec: &FeatureShiftSpec) -> Result<FeatureShiftOut> {
    spec.validate()?;
    base.ensure_valid()?;
    if base.len() < 2 {
        return Err(Error::Config(format!(
            "feature shift needs a base graph with at least 2 snapshots, got {}",
            base.len()
        )));
    }
    let t_out = base.len() - 1;
    let n = base.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut tags = EdgeTags::new();
    let mut sample_prob = Vec::with_capacity(t_out);
    let mut clipped = 0usize;
    let mut reports = Vec::with_capacity(t_out);
    let mut snapshots = Vec::with_capacity(t_out);
    for t in 1..=t_out {
        let raw = spec.p_bar + spec.sigma * (t as f64).cos();
        let p = raw.clamp(0.0, 1.0);
        if p != raw {
            clipped += 1;
        }
        sample_prob.push(p);

        let future = base.snapshot(t + 1)?;
        let mut sampled = Vec::new();
        for &(u, v) in future.edges() {
            if p > 0.0 && rng.gen_bool(p) {
                sampled.push((u, v));
                tags.insert(t + 1, u, v, "sampled");
            } else {
                tags.insert(t + 1, u, v, "base");
            }
        }

        let (x_syn, report) = factorize_links(n, &sampled, spec.dim, spec.max_iters, rng.gen())
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg} (timestamp {t})")),
                other => other,
            })?;
        reports.push(report);

        let snap = base.snapshot(t)?;
        let mut features = Mat::zeros((n, base.feature_dim() + spec.dim));
        for v in 0..n {
            for j in 0..base.feature_dim() {
                features[(v, j)] = snap.features()[(v, j)];
            }
            for j in 0..spec.dim {
                features[(v, base.feature_dim() + j)] = x_syn[(v, j)];
            }
        }
        snapshots.push(Snapshot::new(t, n, snap.edges().to_vec(), features));
    }

    let labels = base.prefix(t_out).labels().cloned();
    let graph = DynamicGraph::new(
        n,
        base.feature_dim() + spec.dim,
        snapshots,
        base.kind(),
        labels,
    );
    graph.ensure_valid()?;
    Ok(FeatureShiftOut {
        graph,
        tags,
        sample_prob,
        clipped,
        reports,
    })
}

// ---------------------------------------------------------------------
// Environment suites: stationary (γ_inv) and non-stationary (γ_dyn).
// ---------------------------------------------------------------------

/// Which environment process drives the features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvMode {
    Stationary,
    Nonstationary,
}

impl EnvMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(EnvMode::Stationary),
            "nonstationary" => Ok(EnvMode::Nonstationary),
            other => Err(Error::Config(format!(
                "unknown environment mode {other:?} (expected stationary or nonstationary)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvMode::Stationary => "stationary",
            EnvMode::Nonstationary => "nonstationary",
        }
    }
}

/// Parameters of the environment-suite generators.
#[derive(Debug, Clone)]
pub struct EnvSuiteSpec {
    pub mode: EnvMode,
    pub num_nodes: usize,
    pub t_len: usize,
    /// Hidden factor count K (stationary mode).
    pub factors: usize,
    /// Fraction of environments whose invariant feature block is
    /// low-noise (stationary mode).
    pub gamma_inv: f64,
    /// Mixing weight of the dynamic factor (non-stationary mode).
    pub gamma_dyn: f64,
    /// Width of each feature block.
    pub block_dim: usize,
    /// Target mean degree of the similarity graph.
    pub mean_degree: f64,
    /// Invariant-block noise in reliable environments.
    pub low_noise: f64,
    /// Invariant-block noise in unreliable environments.
    pub high_noise: f64,
    /// Magnitude of the community signal in the invariant block.
    pub community_center: f64,
    /// Magnitude of a factor's signature in its own block.
    pub factor_center: f64,
    /// Noise of the factor blocks (stationary mode).
    pub static_noise: f64,
    /// Spread of the persistent per-node offsets: the invariant block's
    /// offsets in stationary mode and the static draw's offsets in
    /// non-stationary mode. These keep the similarity ranking stable
    /// over time wherever the time-varying noise is low.
    pub identity_spread: f64,
    /// Mean of the dynamic factor's distribution (non-stationary).
    pub dynamic_mean: f64,
    /// Standard deviation of the dynamic factor (non-stationary).
    pub dynamic_noise: f64,
    /// Use the per-timestep modulation `sin(4t)` instead of the default
    /// dataset-constant `sin(4T)`.
    pub per_step_dynamic: bool,
    /// 1-based index of the factor whose links the OOD rule withholds.
    pub withheld_factor: usize,
    pub seed: u64,
}

impl Default for EnvSuiteSpec {
    fn default() -> Self {
        Self {
            mode: EnvMode::Stationary,
            num_nodes: 200,
            t_len: 8,
            factors: 4,
            gamma_inv: 1.0,
            gamma_dyn: 0.0,
            block_dim: 4,
            mean_degree: 8.0,
            low_noise: 0.1,
            high_noise: 4.0,
            community_center: 1.5,
            factor_center: 1.5,
            static_noise: 0.3,
            identity_spread: 2.0,
            dynamic_mean: 0.0,
            dynamic_noise: 1.0,
            per_step_dynamic: false,
            withheld_factor: 1,
            seed: 0,
        }
    }
}

impl EnvSuiteSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("gamma_inv", self.gamma_inv), ("gamma_dyn", self.gamma_dyn)] {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1], got {g}"
                )));
            }
        }
        if self.factors == 0 {
            return Err(Error::Config("need at least one hidden factor".into()));
        }
        if self.withheld_factor == 0 || self.withheld_factor > self.factors {
            return Err(Error::Config(format!(
                "withheld factor {} outside 1..={}",
                self.withheld_factor, self.factors
            )));
        }
        if self.t_len < 5 {
            return Err(Error::Config(format!(
                "need at least 5 timestamps for a train/val/test split, got {}",
                self.t_len
            )));
        }
        if self.num_nodes < 4 {
            return Err(Error::Config("need at least 4 nodes".into()));
        }
        if self.block_dim == 0 {
            return Err(Error::Config("block dimension must be positive".into()));
        }
        if self.mean_degree <= 0.0 || self.mean_degree >= self.num_nodes as f64 {
            return Err(Error::Config(format!(
                "mean degree {} is degenerate for {} nodes",
                self.mean_degree, self.num_nodes
            )));
        }
        for (name, s) in [
            ("low_noise", self.low_noise),
            ("high_noise", self.high_noise),
            ("static_noise", self.static_noise),
            ("identity_spread", self.identity_spread),
            ("dynamic_noise", self.dynamic_noise),
        ] {
            if s < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be nonnegative, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Number of environments using the low-noise invariant regime.
    pub fn reliable_factors(&self) -> usize {
        (self.gamma_inv * self.factors as f64).round() as usize
    }
}

/// A generated environment-suite dataset.
#[derive(Debug, Clone)]
pub struct EnvDataset {
    pub graph: DynamicGraph,
    /// Per edge: dominant similarity source — `inv` (invariant block),
    /// `k1`..`kK` (factor blocks), or `sta`/`dyn` in non-stationary mode.
    pub tags: EdgeTags,
    pub split: TemporalSplit,
    /// Tag withheld from train/val in the OOD protocol, when the mode
    /// defines one (`k<i>` in stationary mode).
    pub ood_rule: Option<String>,
    /// Per-factor invariant-block noise actually used (stationary mode).
    pub factor_noise: Vec<f64>,
}

/// Builds the top-q cosine-similarity edge set over feature rows:
/// exactly `target` pairs of largest cosine similarity (ties broken
/// toward smaller pair indices). Zero-norm rows have similarity 0.
fn similarity_edges(features: &Mat, target: usize) -> Vec<((usize, usize), f64)> {
    let n = features.nrows();
    let norms: Vec<f64> = (0..n)
        .map(|v| features.row(v).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut scored: Vec<((usize, usize), f64)> = Vec::with_capacity(n * (n - 1) / 2);
    for u in 0..n {
        for v in (u + 1)..n {
            let sim = if norms[u] < 1e-12 || norms[v] < 1e-12 {
                0.0
            } else {
                let dot: f64 = features
                    .row(u)
                    .iter()
                    .zip(features.row(v))
                    .map(|(a, b)| a * b)
                    .sum();
                dot / (norms[u] * norms[v])
            };
            scored.push(((u, v), sim));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(target);
    scored
}

/// Generates a stationary or non-stationary environment-suite dataset
/// for future-link prediction: features are drawn from the hidden-factor
/// process, edges are the top-similarity pairs per snapshot (tuned to
/// the target mean degree), and each timestamp `t < T` is labeled with
/// the links of snapshot `t + 1`.
pub fn gen_env_suite(spec: &EnvSuiteSpec) -> Result<EnvDataset> {
    spec.validate()?;
    let n = spec.num_nodes;
    let target_edges = ((spec.mean_degree * n as f64) / 2.0).round() as usize;
    if target_edges == 0 || target_edges > n * (n - 1) / 2 {
        return Err(Error::Config(format!(
            "target edge count {target_edges} is degenerate for {n} nodes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    match spec.mode {
        EnvMode::Stationary => gen_stationary(spec, target_edges, &mut rng),
        EnvMode::Nonstationary => gen_nonstationary(spec, target_edges, &mut rng),
    }
}

fn gen_stationary(
    spec: &EnvSuiteSpec,
    target_edges: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EnvDataset> {
    let n = spec.num_nodes;
    let k = spec.factors;
    let b = spec.block_dim;
    let dim = b * (k + 1);
    let reliable = spec.reliable_factors();
    let factor_noise: Vec<f64> = (0..k)
        .map(|f| if f < reliable { spec.low_noise } else { spec.high_noise })
        .collect();
    let env_of = |v: usize| v % k;
    let community_of = |v: usize| (v / k) % 2;

    // Persistent per-node identities: a community-signed invariant block
    // with individual offsets, plus the environment's factor signature.
    // Only the invariant block is perturbed afresh each timestamp, with a
    // magnitude set by the environment's reliability — so reliable
    // environments keep a forecastable similarity ranking while
    // unreliable ones reshuffle their links every step.
    let id_offset = Normal::new(0.0, spec.identity_spread).expect("valid normal");
    let blk_noise = Normal::new(0.0, spec.static_noise).expect("valid normal");
    let mut identity = Mat::zeros((n, dim));
    for v in 0..n {
        let e = env_of(v);
        let sign = if community_of(v) == 0 { 1.0 } else { -1.0 };
        for j in 0..b {
            identity[(v, j)] = sign * spec.community_center + id_offset.sample(rng);
        }
        for f in 0..k {
            let center = if f == e { spec.factor_center } else { 0.0 };
            for j in 0..b {
                identity[(v, b * (f + 1) + j)] = center + blk_noise.sample(rng);
            }
        }
    }

    let mut tags = EdgeTags::new();
    let mut snapshots = Vec::with_capacity(spec.t_len);
    for t in 1..=spec.t_len {
        let mut features = identity.clone();
        for v in 0..n {
            let inv_noise = Normal::new(0.0, factor_noise[env_of(v)]).expect("valid normal");
            for j in 0..b {
                features[(v, j)] += inv_noise.sample(rng);
            }
        }

        let chosen = similarity_edges(&features, target_edges);
        let mut edges = Vec::with_capacity(chosen.len());
        for ((u, v), _) in &chosen {
            edges.push((*u, *v));
            // Dominant contribution across blocks decides the tag.
            let block_dot = |lo: usize| -> f64 {
                (lo..lo + b)
                    .map(|j| features[(*u, j)] * features[(*v, j)])
                    .sum()
            };
            let mut best = ("inv".to_string(), block_dot(0));
            for f in 0..k {
                let d = block_dot(b * (f + 1));
                if d > best.1 {
                    best = (format!("k{}", f + 1), d);
                }
            }
            tags.insert(t, *u, *v, best.0);
        }
        if edges.is_empty() {
            return Err(Error::Config(format!(
                "similarity threshold produced an empty snapshot at t={t}"
            )));
        }
        snapshots.push(Snapshot::new(t, n, edges, features));
    }

    let (graph, split) = finish_link_dataset(spec, snapshots)?;
    Ok(EnvDataset {
        graph,
        tags,
        split,
        ood_rule: Some(format!("k{}", spec.withheld_factor)),
        factor_noise,
    })
}

fn gen_nonstationary(
    spec: &EnvSuiteSpec,
    target_edges: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EnvDataset> {
    let n = spec.num_nodes;
    let dim = spec.block_dim * 2;
    let gamma = spec.gamma_dyn;
    let community_of = |v: usize| v % 2;

    // The static factor is drawn once per node and stays fixed; the
    // dynamic factor is drawn fresh at every timestamp. The static
    // draw's per-node spread keeps the similarity ranking decisive, so
    // predictability degrades with the dynamic weight rather than with
    // tie-breaking noise.
    let sta_noise = Normal::new(0.0, spec.identity_spread).expect("valid normal");
    let dyn_draw = Normal::new(spec.dynamic_mean, spec.dynamic_noise).expect("valid normal");
    let mut static_part = Mat::zeros((n, dim));
    for v in 0..n {
        let sign = if community_of(v) == 0 { 1.0 } else { -1.0 };
        for j in 0..dim {
            static_part[(v, j)] = sign * spec.community_center + sta_noise.sample(rng);
        }
    }

    let mut tags = EdgeTags::new();
    let mut snapshots = Vec::with_capacity(spec.t_len);
    for t in 1..=spec.t_len {
        let amp = if spec.per_step_dynamic {
            (4.0 * t as f64).sin()
        } else {
            (4.0 * spec.t_len as f64).sin()
        };
        let mut features = Mat::zeros((n, dim));
        let mut dynamic_part = Mat::zeros((n, dim));
        for v in 0..n {
            for j in 0..dim {
                let z = dyn_draw.sample(rng);
                dynamic_part[(v, j)] = z;
                features[(v, j)] = (1.0 - gamma) * static_part[(v, j)] + gamma * amp * z;
            }
        }

        let chosen = similarity_edges(&features, target_edges);
        let mut edges = Vec::with_capacity(chosen.len());
        for ((u, v), _) in &chosen {
            edges.push((*u, *v));
            let sta: f64 = (0..dim)
                .map(|j| static_part[(*u, j)] * static_part[(*v, j)])
                .sum();
            let dynamic: f64 = (0..dim)
                .map(|j| dynamic_part[(*u, j)] * dynamic_part[(*v, j)])
                .sum();
            let tag = if (1.0 - gamma).powi(2) * sta >= (gamma * amp).powi(2) * dynamic {
                "sta"
            } else {
                "dyn"
            };
            tags.insert(t, *u, *v, tag);
        }
        if edges.is_empty() {
            return Err(Error::Config(format!(
                "similarity threshold produced an empty snapshot at t={t}"
            )));
        }
        snapshots.push(Snapshot::new(t, n, edges, features));
    }

    let (graph, split) = finish_link_dataset(spec, snapshots)?;
    Ok(EnvDataset {
        graph,
        tags,
        split,
        ood_rule: None,
        factor_noise: Vec::new(),
    })
}

/// Labels each timestamp with the next snapshot's links and declares the
/// temporal split (labels exist up to `T − 1`, so the test range is the
/// single timestamp `T − 1`).
fn finish_link_dataset(
    spec: &EnvSuiteSpec,
    snapshots: Vec<Snapshot>,
) -> Result<(DynamicGraph, TemporalSplit)> {
    let n = spec.num_nodes;
    let dim = snapshots[0].features().ncols();
    let mut labels = Vec::new();
    for t in 1..spec.t_len {
        for &(u, v) in snapshots[t].edges() {
            labels.push(LinkLabel { u, v, t });
        }
    }
    let graph = DynamicGraph::new(
        n,
        dim,
        snapshots,
        TaskKind::Link,
        Some(LabelSet::Link(labels)),
    );
    graph.ensure_valid()?;
    let mut split = declared_split(spec.t_len, 2);
    split.test = (spec.t_len - 1, spec.t_len - 1);
    Ok((graph, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{auc, ood_split_links};
    use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

    fn small_sbm(shift: f64, seed: u64) -> SbmSpec {
        SbmSpec {
            shift_level: shift,
            seed,
            ..SbmSpec::default()
        }
    }

    #[test]
    fn sbm_labels_are_balanced_and_constant() {
        let spec = SbmSpec {
            num_nodes: 100,
            seed: 7,
            ..small_sbm(0.5, 7)
        };
        let out = gen_sbm_node_cls(&spec).unwrap();
        let labels = out.graph.labels().unwrap();
        let mut counts = vec![0usize; spec.classes];
        for (v, class) in labels.classes_at(1) {
            counts[class - 1] += 1;
            // Same class at every other timestamp.
            for t in 2..=spec.t_len {
                assert!(labels.classes_at(t).contains(&(v, class)));
            }
        }
        let ideal = spec.num_nodes as f64 / spec.classes as f64;
        for &c in &counts {
            assert!((c as f64 - ideal).abs() <= 1.0, "class sizes {counts:?}");
        }
    }

    /// Pooled same-class and cross-class edge densities of a dataset.
    fn block_densities(out: &SbmDataset, classes: usize, range: (usize, usize)) -> (f64, f64, usize, usize) {
        let g = &out.graph;
        let n = g.node_count();
        let (mut same_edges, mut same_pairs) = (0usize, 0usize);
        let (mut diff_edges, mut diff_pairs) = (0usize, 0usize);
        for t in range.0..=range.1 {
            let snap = g.snapshot(t).unwrap();
            for u in 0..n {
                for v in (u + 1)..n {
                    let same = u % classes == v % classes;
                    let has = snap.has_edge(u, v);
                    if same {
                        same_pairs += 1;
                        same_edges += has as usize;
                    } else {
                        diff_pairs += 1;
                        diff_edges += has as usize;
                    }
                }
            }
        }
        (
            same_edges as f64 / same_pairs as f64,
            diff_edges as f64 / diff_pairs as f64,
            same_pairs,
            diff_pairs,
        )
    }

    #[test]
    fn sbm_intra_density_near_spec_at_every_shift() {
        for &shift in &[0.0, 0.8] {
            let spec = small_sbm(shift, 11);
            let out = gen_sbm_node_cls(&spec).unwrap();
            let (same, _, _, _) = block_densities(&out, spec.classes, (1, spec.t_len));
            assert!(
                (same - spec.intra).abs() <= 0.02,
                "shift {shift}: intra density {same} vs spec {}",
                spec.intra
            );
            assert_eq!(out.clipped, 0);
        }
    }

    #[test]
    fn sbm_block_densities_converge_over_seeds() {
        // At shift 0 the mixture density is closed-form for both pair
        // kinds; every seed must land within 3/sqrt(pairs).
        let expect_same = SBM_INVARIANT_WEIGHT * 0.05 + SBM_VARIANT_WEIGHT * 0.005;
        let expect_diff = 0.005;
        for seed in 0..10 {
            let spec = small_sbm(0.0, seed);
            let out = gen_sbm_node_cls(&spec).unwrap();
            let (same, diff, same_pairs, diff_pairs) =
                block_densities(&out, spec.classes, (1, spec.t_len));
            assert!(
                (same - expect_same).abs() <= 3.0 / (same_pairs as f64).sqrt(),
                "seed {seed}: same-class density {same} vs {expect_same}"
            );
            assert!(
                (diff - expect_diff).abs() <= 3.0 / (diff_pairs as f64).sqrt(),
                "seed {seed}: cross-class density {diff} vs {expect_diff}"
            );
        }
    }

    /// Two-proportion z-test p-value.
    fn two_proportion_p(x1: usize, n1: usize, x2: usize, n2: usize) -> f64 {
        let p1 = x1 as f64 / n1 as f64;
        let p2 = x2 as f64 / n2 as f64;
        let pool = (x1 + x2) as f64 / (n1 + n2) as f64;
        let se = (pool * (1.0 - pool) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
        let z = (p1 - p2) / se;
        let normal = StatNormal::new(0.0, 1.0).unwrap();
        2.0 * (1.0 - normal.cdf(z.abs()))
    }

    #[test]
    fn sbm_shift_zero_train_and_test_distributions_match() {
        // Pool densities over 20 graphs and compare the train range
        // against the test range; at shift 0 they share one law.
        let mut train = (0usize, 0usize, 0usize, 0usize); // same_e, same_p, diff_e, diff_p
        let mut test = (0usize, 0usize, 0usize, 0usize);
        for seed in 100..120 {
            let spec = SbmSpec {
                num_nodes: 120,
                ..small_sbm(0.0, seed)
            };
            let out = gen_sbm_node_cls(&spec).unwrap();
            for (acc, range) in [(&mut train, out.split.train), (&mut test, out.split.test)] {
                let (same, diff, sp, dp) = block_densities(&out, spec.classes, range);
                acc.0 += (same * sp as f64).round() as usize;
                acc.1 += sp;
                acc.2 += (diff * dp as f64).round() as usize;
                acc.3 += dp;
            }
        }
        let p_same = two_proportion_p(train.0, train.1, test.0, test.1);
        let p_diff = two_proportion_p(train.2, train.3, test.2, test.3);
        assert!(p_same > 0.01, "same-class z-test p = {p_same}");
        assert!(p_diff > 0.01, "cross-class z-test p = {p_diff}");
    }

    #[test]
    fn sbm_shift_raises_spurious_pair_density() {
        // With a positive shift, affinity-marked cross-class pairs must
        // be denser in train snapshots than plain cross-class pairs.
        let spec = small_sbm(0.8, 3);
        let out = gen_sbm_node_cls(&spec).unwrap();
        let n = out.graph.node_count();
        let classes = spec.classes;
        let marked: Vec<(usize, usize)> = (0..classes)
            .flat_map(|a| (0..classes).map(move |b| (a, b)))
            .filter(|&(a, b)| a < b && out.affinity[a][b])
            .collect();
        assert!(!marked.is_empty(), "affinity draw has no cross-class pair");
        let (mut m_e, mut m_p, mut u_e, mut u_p) = (0usize, 0usize, 0usize, 0usize);
        for t in out.split.train.0..=out.split.train.1 {
            let snap = out.graph.snapshot(t).unwrap();
            for u in 0..n {
                for v in (u + 1)..n {
                    let (a, b) = (u % classes, v % classes);
                    if a == b {
                        continue;
                    }
                    let pair = (a.min(b), a.max(b));
                    if marked.contains(&pair) {
                        m_p += 1;
                        m_e += snap.has_edge(u, v) as usize;
                    } else {
                        u_p += 1;
                        u_e += snap.has_edge(u, v) as usize;
                    }
                }
            }
        }
        if u_p > 0 {
            let marked_density = m_e as f64 / m_p as f64;
            let unmarked_density = u_e as f64 / u_p as f64;
            assert!(
                marked_density > 1.5 * unmarked_density,
                "marked {marked_density} vs unmarked {unmarked_density}"
            );
        }
    }

    #[test]
    fn sbm_is_deterministic_and_seed_sensitive() {
        let a = gen_sbm_node_cls(&small_sbm(0.6, 5)).unwrap();
        let b = gen_sbm_node_cls(&small_sbm(0.6, 5)).unwrap();
        assert_eq!(a.graph.to_evg1(), b.graph.to_evg1());
        assert_eq!(a.tags.to_text(), b.tags.to_text());
        let c = gen_sbm_node_cls(&small_sbm(0.6, 6)).unwrap();
        assert_ne!(a.graph.to_evg1(), c.graph.to_evg1());
    }

    #[test]
    fn sbm_rejects_bad_specs() {
        assert!(gen_sbm_node_cls(&SbmSpec {
            shift_level: 1.7,
            ..SbmSpec::default()
        })
        .is_err());
        assert!(gen_sbm_node_cls(&SbmSpec {
            intra: -0.1,
            ..SbmSpec::default()
        })
        .is_err());
        assert!(gen_sbm_node_cls(&SbmSpec {
            t_len: 3,
            ..SbmSpec::default()
        })
        .is_err());
    }

    /// Two-community base graph for factorization oracles.
    fn two_block_base(n: usize, t_len: usize, seed: u64) -> DynamicGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut snaps = Vec::new();
        for t in 1..=t_len {
            let mut edges = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    let same = (u < n / 2) == (v < n / 2);
                    let p = if same { 0.3 } else { 0.02 };
                    if rng.gen_bool(p) {
                        edges.push((u, v));
                    }
                }
            }
            let feats = Mat::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
            snaps.push(Snapshot::new(t, n, edges, feats));
        }
        DynamicGraph::new(n, 4, snaps, TaskKind::Link, None)
    }

    #[test]
    fn factorization_reconstructs_sampled_links() {
        let base = two_block_base(100, 2, 9);
        let sampled: Vec<(usize, usize)> = base.snapshot(2).unwrap().edges().to_vec();
        let (x, report) = factorize_links(100, &sampled, 16, 500, 17).unwrap();
        assert!(report.final_loss.is_finite());
        let mut scored = Vec::new();
        for u in 0..100 {
            for v in (u + 1)..100 {
                let dot: f64 = (0..16).map(|j| x[(u, j)] * x[(v, j)]).sum();
                let score = 1.0 / (1.0 + (-dot).exp());
                scored.push((score, sampled.contains(&(u, v))));
            }
        }
        let fit_auc = auc(&scored).unwrap();
        assert!(fit_auc >= 0.9, "reconstruction AUC {fit_auc}");
    }

    #[test]
    fn factorization_of_empty_target_shrinks_to_noise_floor() {
        let (x, report) = factorize_links(100, &[], 16, 500, 23).unwrap();
        assert!(
            report.final_norm < 0.1 * report.init_norm,
            "final norm {} vs init {}",
            report.final_norm,
            report.init_norm
        );
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn feature_shift_preserves_structure_and_original_columns() {
        let base = two_block_base(40, 4, 31);
        let spec = FeatureShiftSpec {
            p_bar: 0.5,
            sigma: 0.2,
            dim: 6,
            max_iters: 50,
            seed: 2,
        };
        let out = gen_feature_shift(&base, &spec).unwrap();
        assert_eq!(out.graph.len(), base.len() - 1);
        assert_eq!(out.graph.feature_dim(), base.feature_dim() + spec.dim);
        for t in 1..=out.graph.len() {
            let new = out.graph.snapshot(t).unwrap();
            let old = base.snapshot(t).unwrap();
            assert_eq!(new.edges(), old.edges(), "structure changed at t={t}");
            for v in 0..base.node_count() {
                for j in 0..base.feature_dim() {
                    assert_eq!(new.features()[(v, j)], old.features()[(v, j)]);
                }
            }
        }
        // Every future edge is tagged either sampled or base.
        for t in 2..=base.len() {
            let future = base.snapshot(t).unwrap();
            for &(u, v) in future.edges() {
                let tag = out.tags.get(t, u, v).unwrap();
                assert!(tag == "sampled" || tag == "base");
            }
        }
        assert_eq!(out.sample_prob.len(), out.graph.len());
        for (t, p) in out.sample_prob.iter().enumerate() {
            let raw: f64 = 0.5 + 0.2 * ((t + 1) as f64).cos();
            assert!((p - raw.clamp(0.0, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_shift_is_deterministic() {
        let base = two_block_base(30, 3, 41);
        let spec = FeatureShiftSpec {
            dim: 4,
            max_iters: 40,
            ..FeatureShiftSpec::default()
        };
        let a = gen_feature_shift(&base, &spec).unwrap();
        let b = gen_feature_shift(&base, &spec).unwrap();
        assert_eq!(a.graph.to_evg1(), b.graph.to_evg1());
        assert_eq!(a.tags.to_text(), b.tags.to_text());
    }

    #[test]
    fn env_nonstationary_gamma_zero_makes_features_constant() {
        let spec = EnvSuiteSpec {
            mode: EnvMode::Nonstationary,
            num_nodes: 40,
            gamma_dyn: 0.0,
            seed: 13,
            ..EnvSuiteSpec::default()
        };
        let out = gen_env_suite(&spec).unwrap();
        let first = out.graph.snapshot(1).unwrap().features().clone();
        for t in 2..=spec.t_len {
            let f = out.graph.snapshot(t).unwrap().features();
            for (a, b) in first.iter().zip(f.iter()) {
                assert_eq!(a, b, "time-variance must be zero at gamma_dyn = 0");
            }
        }
    }

    #[test]
    fn env_gamma_inv_one_uses_only_the_low_noise_regime() {
        let spec = EnvSuiteSpec {
            mode: EnvMode::Stationary,
            num_nodes: 80,
            gamma_inv: 1.0,
            seed: 19,
            ..EnvSuiteSpec::default()
        };
        let out = gen_env_suite(&spec).unwrap();
        assert!(out.factor_noise.iter().all(|&s| s == spec.low_noise));
        // Empirical per-timestamp perturbation of the invariant block
        // (deviation around each node's time-mean) stays near low_noise.
        let t_len = out.graph.snapshots().len();
        let mut dev = 0.0f64;
        let mut count = 0usize;
        for v in 0..spec.num_nodes {
            for j in 0..spec.block_dim {
                let series: Vec<f64> = (1..=t_len)
                    .map(|t| out.graph.snapshot(t).unwrap().features()[(v, j)])
                    .collect();
                let mean = series.iter().sum::<f64>() / series.len() as f64;
                dev += series.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
                count += series.len();
            }
        }
        let std = (dev / count as f64).sqrt();
        assert!(std <= 2.0 * spec.low_noise, "invariant-block std {std}");
    }

    #[test]
    fn env_withheld_factor_filter_is_auditable() {
        let spec = EnvSuiteSpec {
            mode: EnvMode::Stationary,
            num_nodes: 100,
            factors: 2,
            gamma_inv: 0.5,
            seed: 29,
            ..EnvSuiteSpec::default()
        };
        let out = gen_env_suite(&spec).unwrap();
        let rule = out.ood_rule.as_deref().unwrap();
        assert_eq!(rule, "k1");
        let tagged: usize = out
            .tags
            .iter()
            .filter(|(_, tag)| *tag == rule)
            .count();
        assert!(tagged > 0, "no edge carries the withheld tag — vacuous filter");

        let split = ood_split_links(&out.graph, &out.tags, rule).unwrap();
        assert!(split.removed_edges > 0);
        for t in 1..=split.train_view.len() {
            let snap = split.train_view.snapshot(t).unwrap();
            for &(u, v) in snap.edges() {
                assert_ne!(out.tags.get(t, u, v), Some(rule));
            }
        }
        if let Some(labels) = split.train_view.labels() {
            for t in 1..split.train_view.len() {
                for (u, v) in labels.links_at(t) {
                    assert_ne!(out.tags.get(t + 1, u, v), Some(rule));
                }
            }
        }
    }

    #[test]
    fn env_mean_degree_is_respected() {
        let spec = EnvSuiteSpec {
            num_nodes: 100,
            seed: 37,
            ..EnvSuiteSpec::default()
        };
        let out = gen_env_suite(&spec).unwrap();
        for t in 1..=spec.t_len {
            let snap = out.graph.snapshot(t).unwrap();
            let mean_degree = 2.0 * snap.edges().len() as f64 / spec.num_nodes as f64;
            assert!((mean_degree - spec.mean_degree).abs() < 0.1);
        }
    }

    #[test]
    fn env_is_deterministic_and_labels_look_ahead() {
        let spec = EnvSuiteSpec {
            num_nodes: 60,
            seed: 43,
            ..EnvSuiteSpec::default()
        };
        let a = gen_env_suite(&spec).unwrap();
        let b = gen_env_suite(&spec).unwrap();
        assert_eq!(a.graph.to_evg1(), b.graph.to_evg1());
        assert_eq!(a.tags.to_text(), b.tags.to_text());

        let labels = a.graph.labels().unwrap();
        for t in 1..spec.t_len {
            let next = a.graph.snapshot(t + 1).unwrap();
            let at_t = labels.links_at(t);
            assert_eq!(at_t.len(), next.edges().len());
            for (u, v) in at_t {
                assert!(next.has_edge(u, v));
            }
        }
        assert!(labels.links_at(spec.t_len).is_empty());
        assert_eq!(a.split.test, (spec.t_len - 1, spec.t_len - 1));
    }

    #[test]
    fn env_rejects_degenerate_specs() {
        assert!(gen_env_suite(&EnvSuiteSpec {
            gamma_inv: 1.4,
            ..EnvSuiteSpec::default()
        })
        .is_err());
        assert!(gen_env_suite(&EnvSuiteSpec {
            mean_degree: 0.0,
            ..EnvSuiteSpec::default()
        })
        .is_err());
        assert!(gen_env_suite(&EnvSuiteSpec {
            withheld_factor: 9,
            ..EnvSuiteSpec::default()
        })
        .is_err());
        assert!(EnvMode::parse("stationary").is_ok());
        assert!(EnvMode::parse("sideways").is_err());
    }
}
