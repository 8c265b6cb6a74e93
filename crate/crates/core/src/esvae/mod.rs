//! Sequential variational model of the latent environment.
//!
//! The environment behind a dynamic graph is factored into a static
//! vector `e_s` (whole-sequence) and a dynamic sequence `e_d^{1:T}`
//! (causal). Recurrent encoders infer diagonal-Gaussian posteriors from
//! per-timestamp node-mean summaries of the representations H; a
//! recurrent prior models `p(e_d^t | e_d^{<t})`; a two-layer decoder maps
//! `(e_s, e_d^t)` back to a Gaussian over node representations. Training
//! combines the negative ELBO with a triplet loss separating static
//! factors of different sequences and a pseudo-label loss tying dynamic
//! factors to structural uncertainty (see [`cluster`]).

mod cluster;
mod lstm;

pub use cluster::{cluster_pseudo_labels, kmeans, structural_entropy, PseudoLabelTask};
pub use lstm::LstmCell;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoder::NodeRepresentationSequence;
use crate::tensor::{BoundParams, Mat, ParamStore, Tape, Tid};
use crate::{Error, Result};

/// Bound applied to every log-variance output.
pub const LOGVAR_CLAMP: f64 = 8.0;

/// Hyperparameters of the environment model.
#[derive(Debug, Clone)]
pub struct EsvaeConfig {
    /// Dimension d' of the node representations being modeled.
    pub repr_dim: usize,
    /// Static factor dimension k_s.
    pub static_dim: usize,
    /// Dynamic factor dimension k_d (also the recurrent hidden size).
    pub dynamic_dim: usize,
    /// Hidden width of the two-layer decoder.
    pub decoder_hidden: usize,
    /// K-means cluster count m.
    pub clusters: usize,
    /// How many top-uncertainty clusters form each pseudo-label.
    pub top_k: usize,
    /// Triplet margin.
    pub margin: f64,
    /// Weight of the triplet loss.
    pub alpha1: f64,
    /// Weight of the pseudo-label loss.
    pub alpha2: f64,
    pub seed: u64,
}

impl EsvaeConfig {
    pub fn new(repr_dim: usize) -> Self {
        Self {
            repr_dim,
            static_dim: 8,
            dynamic_dim: 16,
            decoder_hidden: 32,
            clusters: 10,
            top_k: 3,
            margin: 1.0,
            alpha1: 0.1,
            alpha2: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repr_dim == 0
            || self.static_dim == 0
            || self.dynamic_dim == 0
            || self.decoder_hidden == 0
        {
            return Err(Error::Config("environment model dims must be positive".into()));
        }
        if self.clusters == 0 || self.top_k == 0 || self.top_k > self.clusters {
            return Err(Error::Config(format!(
                "need 1 <= top_k ({}) <= clusters ({})",
                self.top_k, self.clusters
            )));
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 || self.margin < 0.0 {
            return Err(Error::Config("loss weights and margin must be >= 0".into()));
        }
        Ok(())
    }

    fn static_cell(&self) -> LstmCell {
        LstmCell::new("esvae.stat", self.static_dim)
    }

    fn dynamic_cell(&self) -> LstmCell {
        LstmCell::new("esvae.dyn", self.dynamic_dim)
    }

    fn prior_cell(&self) -> LstmCell {
        LstmCell::new("esvae.prior", self.dynamic_dim)
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Seeded initialization of all model parameters (names prefixed `esvae.`).
///
/// The prior's output heads start at zero so the untrained prior is a
/// standard normal at every step; the posterior heads start off-zero so
/// distinct sequences separate from the first epoch.
pub fn init_params(cfg: &EsvaeConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xE5));
    let mut params = ParamStore::new();
    let (ks, kd, dp) = (cfg.static_dim, cfg.dynamic_dim, cfg.repr_dim);

    cfg.static_cell().init(&mut params, dp, &mut rng);
    params.insert("esvae.stat.h0", Mat::zeros((1, ks)));
    params.insert("esvae.stat.c0", Mat::zeros((1, ks)));
    params.insert("esvae.stat.mu_w", glorot(&mut rng, ks, ks));
    params.insert("esvae.stat.mu_b", Mat::zeros((1, ks)));
    params.insert("esvae.stat.lv_w", glorot(&mut rng, ks, ks));
    params.insert("esvae.stat.lv_b", Mat::zeros((1, ks)));

    cfg.dynamic_cell().init(&mut params, dp, &mut rng);
    params.insert("esvae.dyn.h0", Mat::zeros((1, kd)));
    params.insert("esvae.dyn.c0", Mat::zeros((1, kd)));
    params.insert("esvae.dyn.mu_w", glorot(&mut rng, kd, kd));
    params.insert("esvae.dyn.mu_b", Mat::zeros((1, kd)));
    params.insert("esvae.dyn.lv_w", glorot(&mut rng, kd, kd));
    params.insert("esvae.dyn.lv_b", Mat::zeros((1, kd)));

    cfg.prior_cell().init(&mut params, kd, &mut rng);
    params.insert("esvae.prior.h0", Mat::zeros((1, kd)));
    params.insert("esvae.prior.c0", Mat::zeros((1, kd)));
    params.insert("esvae.prior.mu_w", Mat::zeros((kd, kd)));
    params.insert("esvae.prior.mu_b", Mat::zeros((1, kd)));
    params.insert("esvae.prior.lv_w", Mat::zeros((kd, kd)));
    params.insert("esvae.prior.lv_b", Mat::zeros((1, kd)));

    params.insert("esvae.dec.w1", glorot(&mut rng, ks + kd, cfg.decoder_hidden));
    params.insert("esvae.dec.b1", Mat::zeros((1, cfg.decoder_hidden)));
    params.insert("esvae.dec.w2", glorot(&mut rng, cfg.decoder_hidden, 2 * dp));
    params.insert("esvae.dec.b2", Mat::zeros((1, 2 * dp)));

    params.insert("esvae.se.w", glorot(&mut rng, kd, cfg.clusters));
    params.insert("esvae.se.b", Mat::zeros((1, cfg.clusters)));
    Ok(params)
}

/// Diagonal Gaussian as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Inferred environment posterior: one static factor, T dynamic factors.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvPosterior {
    pub static_factor: GaussianParams,
    pub dynamic: Vec<GaussianParams>,
}

/// Where a sampled environment instance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    Posterior,
    Prior,
}

/// A concrete environment draw.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSample {
    pub e_s: Vec<f64>,
    /// `T x k_d`.
    pub e_d: Mat,
    pub source: SampleSource,
}

/// Frozen reparameterization noise for one loss evaluation. Drawing it
/// outside the loss keeps gradient checks honest and epochs reproducible.
#[derive(Debug, Clone)]
pub struct EsvaeNoise {
    pub e_s: Mat,
    pub e_d: Vec<Mat>,
}

impl EsvaeNoise {
    pub fn draw(t_len: usize, cfg: &EsvaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let e_s = Mat::from_shape_fn((1, cfg.static_dim), |_| rng.sample(StandardNormal));
        let e_d = (0..t_len)
            .map(|_| Mat::from_shape_fn((1, cfg.dynamic_dim), |_| rng.sample(StandardNormal)))
            .collect();
        Self { e_s, e_d }
    }

    /// All-zero noise: reparameterized samples collapse to posterior means.
    pub fn zeros(t_len: usize, cfg: &EsvaeConfig) -> Self {
        Self {
            e_s: Mat::zeros((1, cfg.static_dim)),
            e_d: vec![Mat::zeros((1, cfg.dynamic_dim)); t_len],
        }
    }
}

/// Gaussian with parameters still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeGaussian {
    pub mean: Tid,
    pub logvar: Tid,
}

fn gaussian_head(
    tape: &mut Tape,
    bound: &BoundParams,
    hidden: Tid,
    mu_w: &str,
    mu_b: &str,
    lv_w: &str,
    lv_b: &str,
) -> TapeGaussian {
    let mu_lin = tape.matmul(hidden, bound.id(mu_w));
    let mean = tape.add(mu_lin, bound.id(mu_b));
    let lv_lin = tape.matmul(hidden, bound.id(lv_w));
    let lv_raw = tape.add(lv_lin, bound.id(lv_b));
    let logvar = tape.clamp(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    TapeGaussian { mean, logvar }
}

/// Per-timestamp node-mean summaries of H (each `1 x d'`).
pub fn summaries_on_tape(tape: &mut Tape, h_ts: &[Tid]) -> Vec<Tid> {
    h_ts.iter().map(|&h| tape.mean_rows(h)).collect()
}

/// Posterior over the static factor from the full summary sequence.
pub fn static_posterior_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    summaries: &[Tid],
    cfg: &EsvaeConfig,
) -> TapeGaussian {
    let cell = cfg.static_cell();
    let hs = cell.run(
        tape,
        bound,
        summaries,
        bound.id("esvae.stat.h0"),
        bound.id("esvae.stat.c0"),
    );
    let last = *hs.last().expect("static posterior needs >= 1 timestamp");
    gaussian_head(
        tape, bound, last,
        "esvae.stat.mu_w", "esvae.stat.mu_b", "esvae.stat.lv_w", "esvae.stat.lv_b",
    )
}

/// Causal posteriors over the dynamic factors, one per timestamp.
pub fn dynamic_posterior_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    summaries: &[Tid],
    cfg: &EsvaeConfig,
) -> Vec<TapeGaussian> {
    let cell = cfg.dynamic_cell();
    let hs = cell.run(
        tape,
        bound,
        summaries,
        bound.id("esvae.dyn.h0"),
        bound.id("esvae.dyn.c0"),
    );
    hs.into_iter()
        .map(|h| {
            gaussian_head(
                tape, bound, h,
                "esvae.dyn.mu_w", "esvae.dyn.mu_b", "esvae.dyn.lv_w", "esvae.dyn.lv_b",
            )
        })
        .collect()
}

/// Sequential prior `p(e_d^t | e_d^{<t})` evaluated along a chain of
/// already-drawn dynamic factors: entry t is conditioned on `draws[..t]`.
pub fn prior_chain_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    draws: &[Tid],
    cfg: &EsvaeConfig,
) -> Vec<TapeGaussian> {
    let cell = cfg.prior_cell();
    let mut state = (bound.id("esvae.prior.h0"), bound.id("esvae.prior.c0"));
    let mut out = Vec::with_capacity(draws.len());
    for &e in draws {
        out.push(gaussian_head(
            tape, bound, state.0,
            "esvae.prior.mu_w", "esvae.prior.mu_b", "esvae.prior.lv_w", "esvae.prior.lv_b",
        ));
        state = cell.step(tape, bound, e, state.0, state.1);
    }
    out
}

/// `mean + exp(logvar / 2) * noise` with the noise frozen as a constant.
pub fn reparameterize_on_tape(tape: &mut Tape, g: TapeGaussian, noise: &Mat) -> Tid {
    let eps = tape.constant(noise.clone());
    let half_lv = tape.scale(g.logvar, 0.5);
    let sigma = tape.exp(half_lv);
    let scaled = tape.mul(sigma, eps);
    tape.add(g.mean, scaled)
}

/// Decoder: `(e_s, e_d^t) ->` Gaussian over a node representation.
pub fn decode_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    e_s: Tid,
    e_d_t: Tid,
    cfg: &EsvaeConfig,
) -> TapeGaussian {
    let joint = tape.concat_cols(e_s, e_d_t);
    let lin1 = tape.matmul(joint, bound.id("esvae.dec.w1"));
    let lin1 = tape.add(lin1, bound.id("esvae.dec.b1"));
    let hidden = tape.relu(lin1);
    let lin2 = tape.matmul(hidden, bound.id("esvae.dec.w2"));
    let lin2 = tape.add(lin2, bound.id("esvae.dec.b2"));
    let mean = tape.slice_cols(lin2, 0, cfg.repr_dim);
    let lv_raw = tape.slice_cols(lin2, cfg.repr_dim, cfg.repr_dim);
    let logvar = tape.clamp(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    TapeGaussian { mean, logvar }
}

/// `KL(q || N(0, I))` for a diagonal Gaussian, as a tape scalar.
pub fn kl_standard_on_tape(tape: &mut Tape, q: TapeGaussian) -> Tid {
    let var = tape.exp(q.logvar);
    let mu2 = tape.mul(q.mean, q.mean);
    let sum = tape.add(var, mu2);
    let sum = tape.sub(sum, q.logvar);
    let total = tape.sum_all(sum);
    let k = tape.value(q.mean).ncols() as f64;
    let shifted = tape.scalar_constant(k);
    let total = tape.sub(total, shifted);
    tape.scale(total, 0.5)
}

/// `KL(q || p)` for diagonal Gaussians, as a tape scalar.
pub fn kl_on_tape(tape: &mut Tape, q: TapeGaussian, p: TapeGaussian) -> Tid {
    let lv_diff = tape.sub(p.logvar, q.logvar);
    let lv_ratio = tape.sub(q.logvar, p.logvar);
    let ratio_exp = tape.exp(lv_ratio);
    let mu_diff = tape.sub(q.mean, p.mean);
    let mu_diff2 = tape.mul(mu_diff, mu_diff);
    let neg_lv_p = tape.neg(p.logvar);
    let inv_var_p = tape.exp(neg_lv_p);
    let maha = tape.mul(mu_diff2, inv_var_p);
    let sum = tape.add(lv_diff, ratio_exp);
    let sum = tape.add(sum, maha);
    let total = tape.sum_all(sum);
    let k = tape.value(q.mean).ncols() as f64;
    let shifted = tape.scalar_constant(k);
    let total = tape.sub(total, shifted);
    tape.scale(total, 0.5)
}

/// Gaussian negative log-likelihood of all rows of `h_t` under the
/// decoder output, averaged over nodes.
pub fn recon_nll_on_tape(tape: &mut Tape, h_t: Tid, dec: TapeGaussian) -> Tid {
    let n = tape.value(h_t).nrows() as f64;
    let d = tape.value(h_t).ncols() as f64;
    let neg_mu = tape.neg(dec.mean);
    let diff = tape.add_row(h_t, neg_mu);
    let sq = tape.mul(diff, diff);
    let neg_lv = tape.neg(dec.logvar);
    let inv_var = tape.exp(neg_lv);
    let weighted = tape.mul_row(sq, inv_var);
    let maha = tape.sum_all(weighted);
    let maha = tape.scale(maha, 0.5 / n);
    let lv_term = tape.sum_all(dec.logvar);
    let lv_term = tape.scale(lv_term, 0.5);
    let norm = tape.scalar_constant(0.5 * d * (2.0 * std::f64::consts::PI).ln());
    let partial = tape.add(maha, lv_term);
    tape.add(partial, norm)
}

/// Intermediate handles from one ELBO evaluation.
pub struct SvaeTapeOut {
    /// Total sequential-VAE loss (recon + both KL groups).
    pub loss: Tid,
    pub recon: Tid,
    pub kl_static: Tid,
    pub kl_dynamic: Tid,
    pub static_posterior: TapeGaussian,
    pub dynamic_posterior: Vec<TapeGaussian>,
    pub e_s: Tid,
    pub e_d: Vec<Tid>,
}

/// Negative ELBO with one reparameterized sample per term: reconstruction
/// summed over timestamps, KL of the static factor against the standard
/// normal, KL of each dynamic factor against the sequential prior.
pub fn svae_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    h_ts: &[Tid],
    noise: &EsvaeNoise,
    cfg: &EsvaeConfig,
) -> SvaeTapeOut {
    assert_eq!(noise.e_d.len(), h_ts.len(), "noise/timestamp count mismatch");
    let summaries = summaries_on_tape(tape, h_ts);
    let static_posterior = static_posterior_on_tape(tape, bound, &summaries, cfg);
    let dynamic_posterior = dynamic_posterior_on_tape(tape, bound, &summaries, cfg);

    let e_s = reparameterize_on_tape(tape, static_posterior, &noise.e_s);
    let e_d: Vec<Tid> = dynamic_posterior
        .iter()
        .zip(&noise.e_d)
        .map(|(&q, n)| reparameterize_on_tape(tape, q, n))
        .collect();

    let priors = prior_chain_on_tape(tape, bound, &e_d, cfg);

    let mut recon_total: Option<Tid> = None;
    for (&h_t, &e_d_t) in h_ts.iter().zip(&e_d) {
        let dec = decode_on_tape(tape, bound, e_s, e_d_t, cfg);
        let nll = recon_nll_on_tape(tape, h_t, dec);
        recon_total = Some(match recon_total {
            Some(acc) => tape.add(acc, nll),
            None => nll,
        });
    }
    let recon = recon_total.expect("at least one timestamp");

    let kl_static = kl_standard_on_tape(tape, static_posterior);
    let mut kl_dyn_total: Option<Tid> = None;
    for (&q, &p) in dynamic_posterior.iter().zip(&priors) {
        let kl = kl_on_tape(tape, q, p);
        kl_dyn_total = Some(match kl_dyn_total {
            Some(acc) => tape.add(acc, kl),
            None => kl,
        });
    }
    let kl_dynamic = kl_dyn_total.expect("at least one timestamp");

    let partial = tape.add(recon, kl_static);
    let loss = tape.add(partial, kl_dynamic);
    SvaeTapeOut {
        loss,
        recon,
        kl_static,
        kl_dynamic,
        static_posterior,
        dynamic_posterior,
        e_s,
        e_d,
    }
}

/// How the triplet negative is formed.
#[derive(Debug, Clone)]
pub enum TripletNegative {
    /// Corrupt the anchor by rotating each summary's feature blocks —
    /// used when only one sequence is available.
    RollColumns,
    /// Summaries of a different sequence (`T' x` rows of `1 x d'`).
    OtherSummaries(Vec<Mat>),
}

/// Frozen randomness for one triplet evaluation: the positive is the
/// anchor with its time axis permuted by `perm`.
#[derive(Debug, Clone)]
pub struct TripletPlan {
    pub perm: Vec<usize>,
    pub negative: TripletNegative,
}

impl TripletPlan {
    /// Uniformly random time permutation, negative defaulting to the
    /// rolled-copy corruption.
    pub fn draw(t_len: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..t_len).collect();
        perm.shuffle(rng);
        Self {
            perm,
            negative: TripletNegative::RollColumns,
        }
    }
}

/// Euclidean distance between two `1 x k` rows (smoothed at zero).
fn euclidean_on_tape(tape: &mut Tape, a: Tid, b: Tid) -> Tid {
    let diff = tape.sub(a, b);
    let sq = tape.mul(diff, diff);
    let sum = tape.sum_all(sq);
    let eps = tape.scalar_constant(1e-12);
    let sum = tape.add(sum, eps);
    tape.sqrt(sum)
}

/// Triplet loss over static posterior means:
/// `max(D(a, pos) - D(a, neg) + margin, 0)`.
///
/// The positive re-encodes the anchor's summaries in permuted time order;
/// a trained static encoder should map both near each other and away
/// from a genuinely different sequence.
pub fn triplet_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    summaries: &[Tid],
    plan: &TripletPlan,
    cfg: &EsvaeConfig,
) -> Tid {
    assert_eq!(plan.perm.len(), summaries.len(), "triplet permutation length");
    let anchor = static_posterior_on_tape(tape, bound, summaries, cfg);

    let pos_summaries: Vec<Tid> = plan.perm.iter().map(|&i| summaries[i]).collect();
    let positive = static_posterior_on_tape(tape, bound, &pos_summaries, cfg);

    let neg_summaries: Vec<Tid> = match &plan.negative {
        TripletNegative::RollColumns => summaries
            .iter()
            .map(|&s| {
                let d = tape.value(s).ncols();
                let half = d / 2;
                let left = tape.slice_cols(s, half, d - half);
                let right = tape.slice_cols(s, 0, half);
                tape.concat_cols(left, right)
            })
            .collect(),
        TripletNegative::OtherSummaries(ms) => {
            ms.iter().map(|m| tape.constant(m.clone())).collect()
        }
    };
    let negative = static_posterior_on_tape(tape, bound, &neg_summaries, cfg);

    let d_ap = euclidean_on_tape(tape, anchor.mean, positive.mean);
    let d_an = euclidean_on_tape(tape, anchor.mean, negative.mean);
    let gap = tape.sub(d_ap, d_an);
    let m = tape.scalar_constant(cfg.margin);
    let shifted = tape.add(gap, m);
    tape.relu(shifted)
}

/// Pseudo-label loss: mean binary cross-entropy between the cluster
/// head's logits on each `e_d^t` and the k-hot top-uncertainty targets,
/// summed over timestamps.
pub fn dynamic_reg_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    e_d: &[Tid],
    task: &PseudoLabelTask,
    cfg: &EsvaeConfig,
) -> Tid {
    assert_eq!(e_d.len(), task.labels.len(), "pseudo-label timestamp count");
    let ed_mat = tape.stack_rows(e_d);
    let lin = tape.matmul(ed_mat, bound.id("esvae.se.w"));
    let logits = tape.add_row(lin, bound.id("esvae.se.b"));
    // Stable BCE with logits: softplus(x) - x * z, per entry.
    let targets = tape.constant(task.khot_targets());
    let sp = tape.softplus(logits);
    let xz = tape.mul(logits, targets);
    let bce = tape.sub(sp, xz);
    let total = tape.sum_all(bce);
    tape.scale(total, 1.0 / cfg.clusters as f64)
}

/// Handles for the combined environment-model loss.
pub struct EsvaeTapeOut {
    /// `svae + alpha1 * triplet + alpha2 * pseudo_label`.
    pub total: Tid,
    pub svae: SvaeTapeOut,
    pub triplet: Tid,
    pub pseudo_label: Tid,
}

/// Combined loss with both regularizers, on an existing tape.
pub fn esvae_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    h_ts: &[Tid],
    noise: &EsvaeNoise,
    plan: &TripletPlan,
    task: &PseudoLabelTask,
    cfg: &EsvaeConfig,
) -> EsvaeTapeOut {
    let svae = svae_loss_on_tape(tape, bound, h_ts, noise, cfg);
    let summaries = summaries_on_tape(tape, h_ts);
    let triplet = triplet_loss_on_tape(tape, bound, &summaries, plan, cfg);
    let pseudo_label = dynamic_reg_loss_on_tape(tape, bound, &svae.e_d, task, cfg);
    let t1 = tape.scale(triplet, cfg.alpha1);
    let t2 = tape.scale(pseudo_label, cfg.alpha2);
    let partial = tape.add(svae.loss, t1);
    let total = tape.add(partial, t2);
    EsvaeTapeOut {
        total,
        svae,
        triplet,
        pseudo_label,
    }
}

// ---------------------------------------------------------------------
// Value-level API: each call builds a private tape and extracts numbers.
// ---------------------------------------------------------------------

fn tape_gaussian_values(tape: &Tape, g: TapeGaussian) -> GaussianParams {
    GaussianParams {
        mean: tape.value(g.mean).row(0).to_vec(),
        log_variance: tape.value(g.logvar).row(0).to_vec(),
    }
}

fn summaries_of(h: &NodeRepresentationSequence) -> Vec<Mat> {
    (1..=h.len())
        .map(|t| {
            let m = h.at(t);
            let mut row = Mat::zeros((1, m.ncols()));
            for j in 0..m.ncols() {
                row[(0, j)] = m.column(j).sum() / m.nrows() as f64;
            }
            row
        })
        .collect()
}

fn check_repr_dim(h: &NodeRepresentationSequence, cfg: &EsvaeConfig) -> Result<()> {
    if h.dim() != cfg.repr_dim {
        return Err(Error::Config(format!(
            "representation dim {} does not match model repr_dim {}",
            h.dim(),
            cfg.repr_dim
        )));
    }
    Ok(())
}

/// Prior parameters for the step after the given prefix of dynamic draws
/// (`(t-1) x k_d`; empty for the first step).
pub fn prior_dynamic(
    prefix: &Mat,
    params: &ParamStore,
    cfg: &EsvaeConfig,
) -> Result<GaussianParams> {
    cfg.validate()?;
    if prefix.nrows() > 0 && prefix.ncols() != cfg.dynamic_dim {
        return Err(Error::Config(format!(
            "prior prefix dim {} != dynamic_dim {}",
            prefix.ncols(),
            cfg.dynamic_dim
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let draws: Vec<Tid> = (0..prefix.nrows())
        .map(|i| {
            let row = prefix.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            tape.constant(row)
        })
        .collect();
    // Chain over prefix + one dummy slot: the last chain entry is the
    // prior conditioned on the full prefix.
    let dummy = tape.constant(Mat::zeros((1, cfg.dynamic_dim)));
    let mut all = draws;
    all.push(dummy);
    let chain = prior_chain_on_tape(&mut tape, &bound, &all, cfg);
    Ok(tape_gaussian_values(&tape, *chain.last().expect("nonempty chain")))
}

/// Posterior over the static factor from a full representation sequence.
pub fn encode_static(
    h: &NodeRepresentationSequence,
    params: &ParamStore,
    cfg: &EsvaeConfig,
) -> Result<GaussianParams> {
    cfg.validate()?;
    check_repr_dim(h, cfg)?;
    if h.is_empty() {
        return Err(Error::Contract("cannot encode an empty sequence".into()));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let summaries: Vec<Tid> = summaries_of(h)
        .into_iter()
        .map(|m| tape.constant(m))
        .collect();
    let g = static_posterior_on_tape(&mut tape, &bound, &summaries, cfg);
    Ok(tape_gaussian_values(&tape, g))
}

/// Causal posterior over the dynamic factor at 1-based timestamp `t`,
/// computed from `H^{<=t}` only.
pub fn encode_dynamic(
    h: &NodeRepresentationSequence,
    t: usize,
    params: &ParamStore,
    cfg: &EsvaeConfig,
) -> Result<GaussianParams> {
    cfg.validate()?;
    check_repr_dim(h, cfg)?;
    if t < 1 || t > h.len() {
        return Err(Error::Contract(format!(
            "dynamic posterior needs a nonempty prefix: t={t} with T={}",
            h.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let summaries: Vec<Tid> = summaries_of(h)[..t]
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect();
    let gs = dynamic_posterior_on_tape(&mut tape, &bound, &summaries, cfg);
    Ok(tape_gaussian_values(&tape, *gs.last().expect("nonempty prefix")))
}

/// Full posterior: static factor plus all T dynamic factors.
pub fn posterior(
    h: &NodeRepresentationSequence,
    params: &ParamStore,
    cfg: &EsvaeConfig,
) -> Result<EnvPosterior> {
    let static_factor = encode_static(h, params, cfg)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let summaries: Vec<Tid> = summaries_of(h)
        .into_iter()
        .map(|m| tape.constant(m))
        .collect();
    let gs = dynamic_posterior_on_tape(&mut tape, &bound, &summaries, cfg);
    Ok(EnvPosterior {
        static_factor,
        dynamic: gs
            .into_iter()
            .map(|g| tape_gaussian_values(&tape, g))
            .collect(),
    })
}

/// `mean + sigma * noise` for a diagonal Gaussian.
pub fn reparameterize(p: &GaussianParams, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != p.dim() {
        return Err(Error::Contract(format!(
            "noise dim {} != gaussian dim {}",
            noise.len(),
            p.dim()
        )));
    }
    Ok(p.mean
        .iter()
        .zip(&p.log_variance)
        .zip(noise)
        .map(|((m, lv), n)| m + (0.5 * lv).exp() * n)
        .collect())
}

/// Decode one `(e_s, e_d^t)` pair into a Gaussian over representations.
pub fn decode(
    e_s: &[f64],
    e_d_t: &[f64],
    params: &ParamStore,
    cfg: &EsvaeConfig,
) -> Result<GaussianParams> {
    cfg.validate()?;
    if e_s.len() != cfg.static_dim || e_d_t.len() != cfg.dynamic_dim {
        return Err(Error::Config(format!(
            "decode inputs ({}, {}) do not match (static_dim {}, dynamic_dim {})",
            e_s.len(),
            e_d_t.len(),
            cfg.static_dim,
            cfg.dynamic_dim
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let es = tape.constant(Mat::from_shape_fn((1, e_s.len()), |(_, j)| e_s[j]));
    let ed = tape.constant(Mat::from_shape_fn((1, e_d_t.len()), |(_, j)| e_d_t[j]));
    let g = decode_on_tape(&mut tape, &bound, es, ed, cfg);
    Ok(tape_gaussian_values(&tape, g))
}

/// Closed-form `KL(q || p)` between diagonal Gaussians (value level).
pub fn kl_diag(q: &GaussianParams, p: &GaussianParams) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_variance)
        .zip(p.mean.iter().zip(&p.log_variance))
        .map(|((mq, lq), (mp, lp))| {
            0.5 * (lp - lq + (lq - lp).exp() + (mq - mp).powi(2) * (-lp).exp() - 1.0)
        })
        .sum()
}

/// Loss components of the sequential VAE (value level).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvaeBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl_static: f64,
    pub kl_dynamic: f64,
}

/// Negative ELBO of a representation sequence (value level, frozen noise).
pub fn elbo_loss(
    h: &NodeRepresentationSequence,
    params: &ParamStore,
    cfg: &EsvaeConfig,
    noise: &EsvaeNoise,
) -> Result<SvaeBreakdown> {
    cfg.validate()?;
    check_repr_dim(h, cfg)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let h_ts: Vec<Tid> = (1..=h.len()).map(|t| tape.constant(h.at(t).clone())).collect();
    let out = svae_loss_on_tape(&mut tape, &bound, &h_ts, noise, cfg);
    let breakdown = SvaeBreakdown {
        total: tape.scalar(out.loss),
        reconstruction: tape.scalar(out.recon),
        kl_static: tape.scalar(out.kl_static),
        kl_dynamic: tape.scalar(out.kl_dynamic),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric("non-finite ELBO".into()));
    }
    Ok(breakdown)
}

/// Triplet loss over static factors (value level).
pub fn triplet_static_loss(
    anchor: &NodeRepresentationSequence,
    plan: &TripletPlan,
    params: &ParamStore,
    cfg: &EsvaeConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_repr_dim(anchor, cfg)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let summaries: Vec<Tid> = summaries_of(anchor)
        .into_iter()
        .map(|m| tape.constant(m))
        .collect();
    let loss = triplet_loss_on_tape(&mut tape, &bound, &summaries, plan, cfg);
    Ok(tape.scalar(loss))
}

/// Pseudo-label loss over a matrix of dynamic draws (value level).
pub fn dynamic_regularization_loss(
    e_d: &Mat,
    task: &PseudoLabelTask,
    params: &ParamStore,
    cfg: &EsvaeConfig,
) -> Result<f64> {
    cfg.validate()?;
    if e_d.nrows() != task.labels.len() {
        return Err(Error::Contract(format!(
            "{} dynamic draws vs {} pseudo-labels",
            e_d.nrows(),
            task.labels.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let rows: Vec<Tid> = (0..e_d.nrows())
        .map(|i| tape.constant(e_d.row(i).insert_axis(ndarray::Axis(0)).to_owned()))
        .collect();
    let loss = dynamic_reg_loss_on_tape(&mut tape, &bound, &rows, task, cfg);
    Ok(tape.scalar(loss))
}

/// All components of the combined loss (value level).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsvaeBreakdown {
    pub total: f64,
    pub svae: SvaeBreakdown,
    pub triplet: f64,
    pub pseudo_label: f64,
}

/// `svae + alpha1 * triplet + alpha2 * pseudo_label` (value level).
pub fn esvae_loss(
    h: &NodeRepresentationSequence,
    params: &ParamStore,
    cfg: &EsvaeConfig,
    noise: &EsvaeNoise,
    plan: &TripletPlan,
    task: &PseudoLabelTask,
) -> Result<EsvaeBreakdown> {
    cfg.validate()?;
    check_repr_dim(h, cfg)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let h_ts: Vec<Tid> = (1..=h.len()).map(|t| tape.constant(h.at(t).clone())).collect();
    let out = esvae_loss_on_tape(&mut tape, &bound, &h_ts, noise, plan, task, cfg);
    Ok(EsvaeBreakdown {
        total: tape.scalar(out.total),
        svae: SvaeBreakdown {
            total: tape.scalar(out.svae.loss),
            reconstruction: tape.scalar(out.svae.recon),
            kl_static: tape.scalar(out.svae.kl_static),
            kl_dynamic: tape.scalar(out.svae.kl_dynamic),
        },
        triplet: tape.scalar(out.triplet),
        pseudo_label: tape.scalar(out.pseudo_label),
    })
}

/// Roll the environment model forward from its prior and decode sampled
/// node representations: `count` independent chains each contribute one
/// vector per timestamp, tagged `(vector, t)`.
pub fn sample_generated_library(
    params: &ParamStore,
    cfg: &EsvaeConfig,
    t_len: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, usize)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count * t_len);
    for _ in 0..count {
        let e_s: Vec<f64> = (0..cfg.static_dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut prefix = Mat::zeros((0, cfg.dynamic_dim));
        for t in 1..=t_len {
            let prior = prior_dynamic(&prefix, params, cfg)?;
            let noise: Vec<f64> = (0..cfg.dynamic_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let e_d_t = reparameterize(&prior, &noise)?;
            let dec = decode(&e_s, &e_d_t, params, cfg)?;
            let h: Vec<f64> = dec
                .mean
                .iter()
                .zip(&dec.log_variance)
                .map(|(m, lv)| {
                    let eps: f64 = rng.sample(StandardNormal);
                    m + (0.5 * lv).exp() * eps
                })
                .collect();
            out.push((h, t));

            let mut next = Mat::zeros((prefix.nrows() + 1, cfg.dynamic_dim));
            for i in 0..prefix.nrows() {
                next.row_mut(i).assign(&prefix.row(i));
            }
            for j in 0..cfg.dynamic_dim {
                next[(prefix.nrows(), j)] = e_d_t[j];
            }
            prefix = next;
        }
    }
    Ok(out)
}
