//! Composite objective and the end-to-end training loop.
//!
//! One epoch runs, in order: encode the training prefix, collect the
//! observed sample library, evaluate the environment-model loss, refresh
//! the generated library, recompute stability gates and masks, evaluate
//! the task loss on invariant representations, run the intervention rounds
//! for the risk loss, and take a single joint optimizer step on
//! `L = L_task + beta1 * L_risk + beta2 * L_env`. All discrete per-epoch
//! artifacts — negative samples, reparameterization noise, cluster
//! pseudo-labels, gates, library draws, splice maps — are frozen up front,
//! so the loss is a smooth function of the parameters within the epoch and
//! every run is reproducible from its seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::encoder::{self, EncoderConfig, NodeRepresentationSequence};
use crate::esvae::{
    self, cluster_pseudo_labels, EsvaeConfig, EsvaeNoise, EsvaeTapeOut, PseudoLabelTask,
    TripletPlan,
};
use crate::evaluation::{accuracy, auc, sample_negatives};
use crate::graph::{DynamicGraph, TaskKind, TemporalSplit};
use crate::intervention::{
    build_observed_library, draw_rounds, risk_variance_on_tape, splice_maps, splice_on_tape,
    InterventionPlan, SpliceMaps,
};
use crate::invariance::{self, gates_from_history, masked_invariant_on_tape, InvarianceConfig};
use crate::tensor::{BoundParams, Mat, ParamStore, Tape, Tid};
use crate::{Error, Result};

/// Which loss component, if any, is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Skip intervention rounds; the risk weight is treated as zero.
    NoIntervention,
    /// Skip the environment model; its weight is treated as zero and no
    /// generated samples enter the intervention library.
    NoEsvae,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-intervention" => Ok(Ablation::NoIntervention),
            "no-esvae" => Ok(Ablation::NoEsvae),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected none, no-intervention, no-esvae)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoIntervention => "no-intervention",
            Ablation::NoEsvae => "no-esvae",
        }
    }
}

/// Everything the training loop needs beyond the dataset itself.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the risk (intervention) loss.
    pub beta1: f64,
    /// Weight of the environment-model loss.
    pub beta2: f64,
    pub seed: u64,
    pub split: TemporalSplit,
    /// Negatives drawn per positive link each epoch.
    pub negatives_per_positive: usize,
    /// Intervention rounds S.
    pub rounds: usize,
    /// Fraction of nodes intervened per round.
    pub intervention_ratio: f64,
    /// Restrict replacement draws to the target's timestamp.
    pub match_timestamp: bool,
    /// Probability of sourcing a replacement from the generated pool.
    pub generated_fraction: f64,
    /// Environment-sample chains drawn into the generated pool per epoch.
    pub generated_count: usize,
    pub encoder: EncoderConfig,
    pub esvae: EsvaeConfig,
    pub invariance: InvarianceConfig,
    pub ablation: Ablation,
}

/// Parses a `lo..hi` inclusive range.
pub fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| Error::Config(format!("range {s:?} must look like `lo..hi`")))?;
    let lo = lo
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("malformed range start in {s:?}")))?;
    let hi = hi
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("malformed range end in {s:?}")))?;
    Ok((lo, hi))
}

impl TrainConfig {
    /// Builds the configuration from flat key-value text, with declared
    /// defaults for everything except the split ranges.
    pub fn from_config(cfg: &Config, input_dim: usize) -> Result<Self> {
        let seed = cfg.get_u64("seed", 0)?;
        let hidden = cfg.get_usize("hidden_dim", 16)?;
        let mut enc = EncoderConfig::new(input_dim, hidden);
        enc.layers = cfg.get_usize("encoder_layers", 2)?;
        enc.attention_heads = cfg.get_usize("attention_heads", 4)?;
        enc.seed = seed;

        let mut env = EsvaeConfig::new(hidden);
        env.static_dim = cfg.get_usize("static_dim", 8)?;
        env.dynamic_dim = cfg.get_usize("dynamic_dim", 16)?;
        env.decoder_hidden = cfg.get_usize("decoder_hidden", 32)?;
        env.clusters = cfg.get_usize("clusters", 10)?;
        env.top_k = cfg.get_usize("top_k", 3)?;
        env.margin = cfg.get_f64("margin", 1.0)?;
        env.alpha1 = cfg.get_f64("alpha1", 0.1)?;
        env.alpha2 = cfg.get_f64("alpha2", 0.1)?;
        env.seed = seed;

        let inv = InvarianceConfig {
            delta: cfg.get_f64("delta", 0.1)?,
            cutoff: cfg.get_f64("cutoff", 0.5)?,
            normalize: cfg.get_bool("normalize_gate", true)?,
        };

        let split = TemporalSplit {
            train: parse_range(cfg.require("train_range")?)?,
            val: parse_range(cfg.require("val_range")?)?,
            test: parse_range(cfg.require("test_range")?)?,
        };

        let ablation = Ablation::parse(cfg.get("ablate").unwrap_or("none"))?;

        Ok(Self {
            epochs: cfg.get_usize("epochs", 200)?,
            learning_rate: cfg.get_f64("learning_rate", 1e-3)?,
            beta1: cfg.get_f64("beta1", 0.1)?,
            beta2: cfg.get_f64("beta2", 0.01)?,
            seed,
            split,
            negatives_per_positive: cfg.get_usize("negatives_per_positive", 1)?,
            rounds: cfg.get_usize("intervention_rounds", 4)?,
            intervention_ratio: cfg.get_f64("intervention_ratio", 1.0)?,
            match_timestamp: cfg.get_bool("match_timestamp", false)?,
            generated_fraction: cfg.get_f64("generated_fraction", 0.5)?,
            generated_count: cfg.get_usize("generated_count", 8)?,
            encoder: enc,
            esvae: env,
            invariance: inv,
            ablation,
        })
    }

    pub fn validate(&self, g: &DynamicGraph) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.ablation != Ablation::NoIntervention && self.rounds < 2 {
            return Err(Error::Config(format!(
                "risk variance needs at least 2 intervention rounds, got {}",
                self.rounds
            )));
        }
        if !(0.0..=1.0).contains(&self.intervention_ratio) {
            return Err(Error::Config(format!(
                "intervention ratio must lie in [0, 1], got {}",
                self.intervention_ratio
            )));
        }
        self.split.validate()?;
        if self.split.test.1 > g.len() {
            return Err(Error::Config(format!(
                "split extends to timestamp {} but the graph has {}",
                self.split.test.1,
                g.len()
            )));
        }
        self.encoder.validate()?;
        self.esvae.validate()?;
        self.invariance.validate()?;
        if self.encoder.hidden_dim != self.esvae.repr_dim {
            return Err(Error::Config(format!(
                "environment model repr_dim {} must equal encoder hidden_dim {}",
                self.esvae.repr_dim, self.encoder.hidden_dim
            )));
        }
        let labels = g
            .labels()
            .ok_or_else(|| Error::Config("training requires labels".into()))?;
        if labels.is_empty() {
            return Err(Error::Config("label set is empty".into()));
        }
        Ok(())
    }
}

/// Initializes every trainable parameter group: encoder, environment
/// model, the shared invariant weight vector, and — for node tasks — the
/// class head (`pred.w`, `pred.b`).
pub fn init_all_params(tc: &TrainConfig, g: &DynamicGraph) -> Result<ParamStore> {
    let mut params = encoder::init_params(&tc.encoder)?;
    params.merge(esvae::init_params(&tc.esvae)?);
    params.merge(invariance::init_params(tc.encoder.hidden_dim)?);
    if g.kind() == TaskKind::NodeClass {
        let classes = g
            .labels()
            .map(|l| l.num_classes())
            .filter(|&c| c >= 2)
            .ok_or_else(|| Error::Config("node task needs at least 2 classes".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x9D));
        let d = tc.encoder.hidden_dim;
        let limit = (6.0 / (d + classes) as f64).sqrt();
        let w = Mat::from_shape_fn((d, classes), |_| rng.gen_range(-limit..limit));
        params.insert("pred.w", w);
        params.insert("pred.b", Mat::zeros((1, classes)));
    }
    Ok(params)
}

/// One epoch's supervised targets: positives plus freshly drawn negatives
/// for links, or labeled nodes for classification.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskBatch {
    Link {
        /// Per timestamp: `(t, positives, negatives)`.
        per_t: Vec<(usize, Vec<(usize, usize)>, Vec<(usize, usize)>)>,
    },
    Node {
        /// Per timestamp: `(t, (node, class))` with classes `1..=C`.
        per_t: Vec<(usize, Vec<(usize, usize)>)>,
    },
}

impl TaskBatch {
    /// Timestamps whose representations the batch reads.
    pub fn timestamps(&self) -> Vec<usize> {
        match self {
            TaskBatch::Link { per_t } => per_t.iter().map(|e| e.0).collect(),
            TaskBatch::Node { per_t } => per_t.iter().map(|e| e.0).collect(),
        }
    }
}

/// Draws the epoch's task batch over the given timestamps. Link negatives
/// are uniform pairs excluding self-pairs, the timestamp's positives, and
/// the edges already present in the snapshot.
pub fn draw_task_batch(
    g: &DynamicGraph,
    timestamps: &[usize],
    negatives_per_positive: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskBatch> {
    let labels = g
        .labels()
        .ok_or_else(|| Error::Config("cannot build a task batch without labels".into()))?;
    match labels.kind() {
        TaskKind::Link => {
            let mut per_t = Vec::new();
            for &t in timestamps {
                let positives = labels.links_at(t);
                if positives.is_empty() {
                    continue;
                }
                let snap = g.snapshot(t)?;
                let pos_set: std::collections::BTreeSet<(usize, usize)> =
                    positives.iter().copied().collect();
                let negatives = sample_negatives(
                    g.node_count(),
                    positives.len() * negatives_per_positive,
                    |u, v| pos_set.contains(&(u, v)) || snap.has_edge(u, v),
                    rng,
                )?;
                per_t.push((t, positives, negatives));
            }
            if per_t.is_empty() {
                return Err(Error::Config(format!(
                    "no link labels in timestamps {timestamps:?}"
                )));
            }
            Ok(TaskBatch::Link { per_t })
        }
        TaskKind::NodeClass => {
            let mut per_t = Vec::new();
            for &t in timestamps {
                let items = labels.classes_at(t);
                if !items.is_empty() {
                    per_t.push((t, items));
                }
            }
            if per_t.is_empty() {
                return Err(Error::Config(format!(
                    "no class labels in timestamps {timestamps:?}"
                )));
            }
            Ok(TaskBatch::Node { per_t })
        }
    }
}

/// Task loss on the tape over invariant representations, one entry of
/// `h_i` per timestamp the batch touches.
///
/// Links: mean binary cross-entropy of the symmetric dot-product scorer
/// over positives and negatives. Nodes: mean cross-entropy of the linear
/// class head.
pub fn task_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &TaskBatch,
    h_i: &BTreeMap<usize, Tid>,
) -> Result<Tid> {
    let need = |t: usize| -> Result<Tid> {
        h_i.copied_get(t)
            .ok_or_else(|| Error::Contract(format!("no representations for timestamp {t}")))
    };
    match batch {
        TaskBatch::Link { per_t } => {
            let mut total: Option<Tid> = None;
            let mut count = 0usize;
            for (t, positives, negatives) in per_t {
                let h = need(*t)?;
                let m = positives.len() + negatives.len();
                let mut us = Vec::with_capacity(m);
                let mut vs = Vec::with_capacity(m);
                let mut ys = Mat::zeros((m, 1));
                for (i, &(u, v)) in positives.iter().chain(negatives.iter()).enumerate() {
                    us.push(u);
                    vs.push(v);
                    if i < positives.len() {
                        ys[(i, 0)] = 1.0;
                    }
                }
                let hu = tape.gather_rows(h, us);
                let hv = tape.gather_rows(h, vs);
                let prod = tape.mul(hu, hv);
                let logits = tape.row_sums(prod);
                let y = tape.constant(ys);
                // Stable BCE with logits: softplus(x) - x * y.
                let sp = tape.softplus(logits);
                let xy = tape.mul(logits, y);
                let bce = tape.sub(sp, xy);
                let sum = tape.sum_all(bce);
                total = Some(match total {
                    Some(acc) => tape.add(acc, sum),
                    None => sum,
                });
                count += m;
            }
            let total = total.ok_or_else(|| Error::Config("empty link batch".into()))?;
            Ok(tape.scale(total, 1.0 / count as f64))
        }
        TaskBatch::Node { per_t } => {
            let w = bound.id("pred.w");
            let b = bound.id("pred.b");
            let mut total: Option<Tid> = None;
            let mut count = 0usize;
            for (t, items) in per_t {
                let h = need(*t)?;
                let nodes: Vec<usize> = items.iter().map(|&(v, _)| v).collect();
                let classes: Vec<usize> = items.iter().map(|&(_, c)| c - 1).collect();
                let rows = tape.gather_rows(h, nodes);
                let lin = tape.matmul(rows, w);
                let logits = tape.add_row(lin, b);
                let lse = tape.row_log_sum_exp(logits);
                let picked = tape.select_per_row(logits, classes);
                let ce = tape.sub(lse, picked);
                let sum = tape.sum_all(ce);
                total = Some(match total {
                    Some(acc) => tape.add(acc, sum),
                    None => sum,
                });
                count += items.len();
            }
            let total = total.ok_or_else(|| Error::Config("empty node batch".into()))?;
            Ok(tape.scale(total, 1.0 / count as f64))
        }
    }
}

trait CopiedGet {
    fn copied_get(&self, t: usize) -> Option<Tid>;
}

impl CopiedGet for BTreeMap<usize, Tid> {
    fn copied_get(&self, t: usize) -> Option<Tid> {
        self.get(&t).copied()
    }
}

/// Value-level task loss: evaluates [`task_loss_on_tape`] on constants.
pub fn task_loss_value(
    batch: &TaskBatch,
    h_i_by_t: &BTreeMap<usize, Mat>,
    params: &ParamStore,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let ids: BTreeMap<usize, Tid> = h_i_by_t
        .iter()
        .map(|(&t, m)| (t, tape.constant(m.clone())))
        .collect();
    let loss = task_loss_on_tape(&mut tape, &bound, batch, &ids)?;
    Ok(tape.scalar(loss))
}

/// The composite objective `task + beta1 * risk + beta2 * env`.
pub fn total_loss(task: f64, risk: f64, env: f64, beta1: f64, beta2: f64) -> f64 {
    task + beta1 * risk + beta2 * env
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub decay1: f64,
    pub decay2: f64,
    pub epsilon: f64,
    steps: usize,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            decay1: 0.9,
            decay2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter with a gradient entry.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>) {
        self.steps += 1;
        let c1 = 1.0 - self.decay1.powi(self.steps as i32);
        let c2 = 1.0 - self.decay2.powi(self.steps as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Mat::zeros(p.dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Mat::zeros(p.dim()));
            for ((pi, gi), (mi, vi)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.decay1 * *mi + (1.0 - self.decay1) * gi;
                *vi = self.decay2 * *vi + (1.0 - self.decay2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Discrete artifacts frozen at the start of an epoch. Within the epoch the
/// loss is a smooth function of the parameters given this freeze.
#[derive(Debug, Clone)]
pub struct EpochFreeze {
    pub batch: TaskBatch,
    pub noise: EsvaeNoise,
    pub triplet: TripletPlan,
    pub pseudo: Option<PseudoLabelTask>,
    /// Binary stability gates, one row per node.
    pub gates: Mat,
    /// Per round, per affected timestamp.
    pub splices: Vec<Vec<SpliceMaps>>,
}

/// Builds the epoch freeze from the detached representations of the
/// current encoder pass.
pub fn build_freeze(
    g_train: &DynamicGraph,
    h: &NodeRepresentationSequence,
    params: &ParamStore,
    tc: &TrainConfig,
    epoch_seed: u64,
) -> Result<EpochFreeze> {
    let t_hi = tc.split.train.1;
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let stamps: Vec<usize> = tc.split.train_timestamps().collect();
    let batch = draw_task_batch(g_train, &stamps, tc.negatives_per_positive, &mut rng)?;
    let noise = EsvaeNoise::draw(t_hi, &tc.esvae, &mut rng);
    let triplet = TripletPlan::draw(t_hi, &mut rng);
    let pseudo = if tc.ablation == Ablation::NoEsvae {
        None
    } else {
        Some(cluster_pseudo_labels(
            g_train,
            h,
            tc.esvae.clusters,
            tc.esvae.top_k,
            epoch_seed,
        )?)
    };
    let gates = gates_from_history(h, t_hi, &tc.invariance)?;
    let masks = invariance::masks(&gates, params.get(invariance::WEIGHT_NAME))?;

    let splices = if tc.ablation == Ablation::NoIntervention {
        Vec::new()
    } else {
        let mut library = build_observed_library(h, rng.gen());
        if tc.ablation != Ablation::NoEsvae && tc.generated_count > 0 {
            library.set_generated(esvae::sample_generated_library(
                params,
                &tc.esvae,
                t_hi,
                tc.generated_count,
                rng.gen(),
            )?);
        }
        let mut plan = if tc.intervention_ratio >= 1.0 {
            InterventionPlan::full_final_timestamp(h.node_count(), t_hi, tc.rounds)
        } else {
            InterventionPlan::sampled(
                h.node_count(),
                t_hi,
                tc.intervention_ratio,
                tc.rounds,
                &mut rng,
            )
        };
        plan.match_timestamp = tc.match_timestamp;
        plan.generated_fraction = if library.generated().is_empty() {
            0.0
        } else {
            tc.generated_fraction
        };
        plan.validate(h.node_count(), h.len())?;
        let draws = draw_rounds(&library, &plan)?;
        draws
            .rounds
            .iter()
            .map(|round| splice_maps(h, &masks, tc.invariance.cutoff, &library, round))
            .collect::<Result<Vec<_>>>()?
    };

    Ok(EpochFreeze {
        batch,
        noise,
        triplet,
        pseudo,
        gates,
        splices,
    })
}

/// Tape handles of one epoch's loss components.
pub struct EpochLosses {
    pub total: Tid,
    pub task: Tid,
    pub risk: Option<Tid>,
    pub env: Option<EsvaeTapeOut>,
}

/// Builds the composite loss graph from already-encoded representations.
pub fn losses_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    enc: &[Tid],
    freeze: &EpochFreeze,
    tc: &TrainConfig,
) -> Result<EpochLosses> {
    let t_hi = tc.split.train.1;
    if enc.len() < t_hi {
        return Err(Error::Contract(format!(
            "encoded {} timestamps but the training range needs {t_hi}",
            enc.len()
        )));
    }

    // Invariant representations for every training timestamp.
    let mut h_i: BTreeMap<usize, Tid> = BTreeMap::new();
    for t in 1..=t_hi {
        let masked = masked_invariant_on_tape(tape, bound, enc[t - 1], &freeze.gates);
        h_i.insert(t, masked);
    }

    let task = task_loss_on_tape(tape, bound, &freeze.batch, &h_i)?;
    let mut total = task;

    let env = match (&freeze.pseudo, tc.ablation) {
        (Some(pseudo), ablation) if ablation != Ablation::NoEsvae => {
            let h_ts: Vec<Tid> = enc[..t_hi].to_vec();
            let out = esvae::esvae_loss_on_tape(
                tape,
                bound,
                &h_ts,
                &freeze.noise,
                &freeze.triplet,
                pseudo,
                &tc.esvae,
            );
            let weighted = tape.scale(out.total, tc.beta2);
            total = tape.add(total, weighted);
            Some(out)
        }
        _ => None,
    };

    let risk = if freeze.splices.is_empty() {
        None
    } else {
        let mut round_losses = Vec::with_capacity(freeze.splices.len());
        for round in &freeze.splices {
            let mut h_i_round = h_i.clone();
            for maps in round {
                let spliced = splice_on_tape(tape, enc[maps.timestamp - 1], maps);
                let masked = masked_invariant_on_tape(tape, bound, spliced, &freeze.gates);
                h_i_round.insert(maps.timestamp, masked);
            }
            round_losses.push(task_loss_on_tape(tape, bound, &freeze.batch, &h_i_round)?);
        }
        let variance = risk_variance_on_tape(tape, &round_losses);
        let weighted = tape.scale(variance, tc.beta1);
        total = tape.add(total, weighted);
        Some(variance)
    };

    Ok(EpochLosses {
        total,
        task,
        risk,
        env,
    })
}

/// One row of the metric history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_task: f64,
    pub l_risk: f64,
    pub l_svae: f64,
    pub l_s: f64,
    pub l_d: f64,
    pub val_metric: f64,
}

/// Renders the history in the documented CSV column order.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,l_task,l_risk,l_svae,l_s,l_d,val_metric\n");
    for r in history {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.epoch, r.l_task, r.l_risk, r.l_svae, r.l_s, r.l_d, r.val_metric
        ));
    }
    out
}

/// Result of a training run: best-validation parameters plus history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub params: ParamStore,
    /// Parameters after the final epoch.
    pub final_params: ParamStore,
    /// Stability gates frozen at the best epoch.
    pub gates: Mat,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Runs the full training loop and returns the best-validation checkpoint.
pub fn train(g: &DynamicGraph, tc: &TrainConfig) -> Result<TrainOutcome> {
    g.ensure_valid()?;
    tc.validate(g)?;
    let g_train = g.prefix(tc.split.train.1);

    let mut params = init_all_params(tc, g)?;
    let mut adam = Adam::new(tc.learning_rate);
    let mut master = ChaCha8Rng::seed_from_u64(tc.seed);

    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, ParamStore, Mat)> = None;

    for epoch in 1..=tc.epochs {
        let epoch_seed: u64 = master.gen();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let enc = encoder::encode_on_tape(&mut tape, &bound, &g_train, &tc.encoder)?;
        let values: Vec<Mat> = enc.iter().map(|&id| tape.value(id).clone()).collect();
        let h = NodeRepresentationSequence::new(values, tc.encoder.fingerprint());
        if !h.all_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: "non-finite node representations".into(),
            });
        }

        let freeze = build_freeze(&g_train, &h, &params, tc, epoch_seed)?;
        let losses = losses_on_tape(&mut tape, &bound, &enc, &freeze, tc)?;

        let total_value = tape.scalar(losses.total);
        if !total_value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                msg: format!("total loss is {total_value}"),
            });
        }

        let record_task = tape.scalar(losses.task);
        let record_risk = losses.risk.map_or(0.0, |r| tape.scalar(r));
        let (record_svae, record_s, record_d) = match &losses.env {
            Some(env) => (
                tape.scalar(env.svae.loss),
                tape.scalar(env.triplet),
                tape.scalar(env.pseudo_label),
            ),
            None => (0.0, 0.0, 0.0),
        };

        let grads = tape.backward(losses.total);
        let named = grads.named(&tape, &bound);
        adam.step(&mut params, &named);

        let val_metric = evaluate_metric(
            g,
            tc,
            &params,
            &tc.split.val_timestamps().collect::<Vec<_>>(),
        )?;
        history.push(EpochRecord {
            epoch,
            l_task: record_task,
            l_risk: record_risk,
            l_svae: record_svae,
            l_s: record_s,
            l_d: record_d,
            val_metric,
        });

        let improved = best.as_ref().map_or(true, |(_, b, _, _)| val_metric > *b);
        if improved {
            best = Some((epoch, val_metric, params.clone(), freeze.gates.clone()));
        }
    }

    let (best_epoch, best_val, best_params, gates) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best_params,
        final_params: params,
        gates,
        history,
        best_epoch,
        best_val,
    })
}

/// Invariant representations at timestamp `t`, using gate history up to
/// `t` and the current weights — the inference-time mask path.
pub fn invariant_at(
    h: &NodeRepresentationSequence,
    t: usize,
    tc: &TrainConfig,
    params: &ParamStore,
) -> Result<Mat> {
    let gates = gates_from_history(h, t, &tc.invariance)?;
    let masks = invariance::masks(&gates, params.get(invariance::WEIGHT_NAME))?;
    let (h_i, _) = masks.split(h.at(t))?;
    Ok(h_i)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Task metric over the labeled timestamps: mean AUC (links) or mean
/// accuracy (nodes). Link negatives are a fixed seeded draw per timestamp,
/// independent of the epoch, so values are comparable across a run.
pub fn evaluate_metric(
    g: &DynamicGraph,
    tc: &TrainConfig,
    params: &ParamStore,
    timestamps: &[usize],
) -> Result<f64> {
    let labels = g
        .labels()
        .ok_or_else(|| Error::Config("evaluation requires labels".into()))?;
    let h = encoder::encode(g, &tc.encoder, params)?;
    let mut metrics = Vec::new();
    for &t in timestamps {
        match labels.kind() {
            TaskKind::Link => {
                let positives = labels.links_at(t);
                if positives.is_empty() {
                    continue;
                }
                let h_i = invariant_at(&h, t, tc, params)?;
                let snap = g.snapshot(t)?;
                let pos_set: std::collections::BTreeSet<(usize, usize)> =
                    positives.iter().copied().collect();
                let mut rng = ChaCha8Rng::seed_from_u64(
                    tc.seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(t as u64),
                );
                let negatives = sample_negatives(
                    g.node_count(),
                    positives.len(),
                    |u, v| pos_set.contains(&(u, v)) || snap.has_edge(u, v),
                    &mut rng,
                )?;
                let mut scored = Vec::with_capacity(positives.len() + negatives.len());
                for (&(u, v), y) in positives
                    .iter()
                    .map(|p| (p, true))
                    .chain(negatives.iter().map(|n| (n, false)))
                {
                    let dot: f64 = h_i.row(u).iter().zip(h_i.row(v)).map(|(a, b)| a * b).sum();
                    scored.push((sigmoid(dot), y));
                }
                metrics.push(auc(&scored)?);
            }
            TaskKind::NodeClass => {
                let items = labels.classes_at(t);
                if items.is_empty() {
                    continue;
                }
                let h_i = invariant_at(&h, t, tc, params)?;
                let w = params.get("pred.w");
                let b = params.get("pred.b");
                let mut predictions = Vec::with_capacity(items.len());
                let mut truth = Vec::with_capacity(items.len());
                for &(v, class) in &items {
                    let logits: Vec<f64> = (0..w.ncols())
                        .map(|c| {
                            h_i.row(v)
                                .iter()
                                .zip(w.column(c))
                                .map(|(x, wc)| x * wc)
                                .sum::<f64>()
                                + b[(0, c)]
                        })
                        .collect();
                    let arg = logits
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i + 1)
                        .expect("at least one class");
                    predictions.push(arg);
                    truth.push(class);
                }
                metrics.push(accuracy(&predictions, &truth)?);
            }
        }
    }
    if metrics.is_empty() {
        return Err(Error::Config(format!(
            "no labeled timestamps among {timestamps:?}"
        )));
    }
    Ok(metrics.iter().sum::<f64>() / metrics.len() as f64)
}

/// A prediction request at the final timestamp.
#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    /// Node pairs to score for future links.
    Links(Vec<(usize, usize)>),
    /// Nodes whose class distribution is requested.
    Nodes(Vec<usize>),
}

/// Prediction output matching the query kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Scores {
    /// Probability per queried pair.
    Links(Vec<f64>),
    /// Class distribution per queried node (sums to 1).
    Classes(Vec<Vec<f64>>),
}

/// Deterministic forward pass over invariant representations at the final
/// timestamp.
pub fn predict(
    g: &DynamicGraph,
    tc: &TrainConfig,
    params: &ParamStore,
    query: &Query,
) -> Result<Scores> {
    let h = encoder::encode(g, &tc.encoder, params)?;
    let t = g.len();
    let h_i = invariant_at(&h, t, tc, params)?;
    let check = |v: usize| -> Result<()> {
        if v >= g.node_count() {
            return Err(Error::Index(format!(
                "queried node {v} outside 0..{}",
                g.node_count()
            )));
        }
        Ok(())
    };
    match query {
        Query::Links(pairs) => {
            let mut out = Vec::with_capacity(pairs.len());
            for &(u, v) in pairs {
                check(u)?;
                check(v)?;
                let dot: f64 = h_i.row(u).iter().zip(h_i.row(v)).map(|(a, b)| a * b).sum();
                out.push(sigmoid(dot));
            }
            Ok(Scores::Links(out))
        }
        Query::Nodes(nodes) => {
            if g.kind() != TaskKind::NodeClass {
                return Err(Error::Config(
                    "class queries need a node-classification model".into(),
                ));
            }
            let w = params.get("pred.w");
            let b = params.get("pred.b");
            let mut out = Vec::with_capacity(nodes.len());
            for &v in nodes {
                check(v)?;
                let logits: Vec<f64> = (0..w.ncols())
                    .map(|c| {
                        h_i.row(v)
                            .iter()
                            .zip(w.column(c))
                            .map(|(x, wc)| x * wc)
                            .sum::<f64>()
                            + b[(0, c)]
                    })
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                out.push(exps.into_iter().map(|e| e / z).collect());
            }
            Ok(Scores::Classes(out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ClassLabel, LabelSet, LinkLabel, Snapshot};
    use crate::tensor::gradient_check;

    /// Small link-task fixture: 6 nodes, 3 snapshots, ring-ish edges.
    fn link_fixture(seed: u64) -> DynamicGraph {
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = |rng: &mut ChaCha8Rng| {
            Mat::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0))
        };
        let snaps = vec![
            Snapshot::new(1, n, vec![(0, 1), (1, 2), (3, 4)], feats(&mut rng)),
            Snapshot::new(2, n, vec![(0, 1), (2, 3), (4, 5)], feats(&mut rng)),
            Snapshot::new(3, n, vec![(1, 2), (2, 4), (0, 5)], feats(&mut rng)),
        ];
        let labels = LabelSet::Link(vec![
            LinkLabel { u: 0, v: 1, t: 1 },
            LinkLabel { u: 2, v: 3, t: 1 },
            LinkLabel { u: 1, v: 2, t: 2 },
            LinkLabel { u: 2, v: 4, t: 2 },
            LinkLabel { u: 0, v: 3, t: 3 },
        ]);
        DynamicGraph::new(n, 4, snaps, TaskKind::Link, Some(labels))
    }

    fn small_tc(g: &DynamicGraph) -> TrainConfig {
        let mut cfg = Config::new();
        cfg.set("hidden_dim", 4);
        cfg.set("attention_heads", 2);
        cfg.set("encoder_layers", 1);
        cfg.set("static_dim", 3);
        cfg.set("dynamic_dim", 3);
        cfg.set("decoder_hidden", 5);
        cfg.set("clusters", 3);
        cfg.set("top_k", 1);
        cfg.set("intervention_rounds", 2);
        cfg.set("generated_count", 2);
        cfg.set("epochs", 1);
        cfg.set("train_range", "1..1");
        cfg.set("val_range", "2..2");
        cfg.set("test_range", "3..3");
        cfg.set("seed", 5);
        TrainConfig::from_config(&cfg, g.feature_dim()).unwrap()
    }

    #[test]
    fn config_parsing_and_validation() {
        let g = link_fixture(1);
        let tc = small_tc(&g);
        assert_eq!(tc.split.train, (1, 1));
        assert_eq!(tc.rounds, 2);
        tc.validate(&g).unwrap();

        // Split beyond the graph is rejected.
        let mut bad = tc.clone();
        bad.split.test = (3, 9);
        assert!(bad.validate(&g).is_err());

        // Mismatched repr dim is rejected.
        let mut bad = tc.clone();
        bad.esvae.repr_dim = 7;
        assert!(bad.validate(&g).is_err());

        assert!(parse_range("2..5").unwrap() == (2, 5));
        assert!(parse_range("5").is_err());
        assert!(Ablation::parse("no-esvae").is_ok());
        assert!(Ablation::parse("nope").is_err());
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.5, 0.1), 2.3);
        assert_eq!(total_loss(1.0, 9.0, 9.0, 0.0, 0.0), 1.0);
    }

    #[test]
    fn uniform_class_logits_cost_ln_c() {
        // Two classes, zeroed head: every logit 0, CE = ln 2.
        let n = 4;
        let snaps = vec![Snapshot::new(1, n, vec![(0, 1)], Mat::zeros((n, 2)))];
        let labels = LabelSet::NodeClass(vec![
            ClassLabel { v: 0, t: 1, class: 1 },
            ClassLabel { v: 1, t: 1, class: 2 },
        ]);
        let g = DynamicGraph::new(n, 2, snaps, TaskKind::NodeClass, Some(labels));
        let mut params = ParamStore::new();
        params.insert("pred.w", Mat::zeros((3, 2)));
        params.insert("pred.b", Mat::zeros((1, 2)));
        let batch = draw_task_batch(
            &g,
            &[1],
            1,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let mut h = BTreeMap::new();
        h.insert(1, Mat::from_elem((n, 3), 0.3));
        let loss = task_loss_value(&batch, &h, &params).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn strong_logits_drive_link_loss_to_zero() {
        let g = link_fixture(2);
        let batch = draw_task_batch(&g, &[1], 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let TaskBatch::Link { per_t } = &batch else { unreachable!() };
        let (_, positives, negatives) = &per_t[0];
        // Hand-build representations: strongly aligned rows for positive
        // pairs, strongly opposed for negatives.
        let mut h = Mat::zeros((6, 8));
        for (i, &(u, v)) in positives.iter().enumerate() {
            h[(u, i)] = 30.0;
            h[(v, i)] = 30.0;
        }
        for (i, &(u, v)) in negatives.iter().enumerate() {
            h[(u, 4 + i)] = 30.0;
            h[(v, 4 + i)] = -30.0;
        }
        let mut by_t = BTreeMap::new();
        by_t.insert(1, h);
        let params = ParamStore::new();
        let loss = task_loss_value(&batch, &by_t, &params).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn task_loss_ignores_variant_part() {
        // Zeroing fully-masked-out dimensions must not change the loss:
        // the invariant representations are all the predictor reads.
        let g = link_fixture(4);
        let batch = draw_task_batch(&g, &[1], 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = Mat::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        // Mask: dims 0-1 invariant, dims 2-3 variant (gate off).
        let gates = Mat::from_shape_fn((6, 4), |(_, j)| if j < 2 { 1.0 } else { 0.0 });
        let w = Mat::zeros((1, 4));
        let masks = invariance::masks(&gates, &w).unwrap();
        let (h_i, _) = masks.split(&h).unwrap();

        let mut zeroed = h.clone();
        for v in 0..6 {
            zeroed[(v, 2)] = 0.0;
            zeroed[(v, 3)] = 0.0;
        }
        let (h_i_zeroed, _) = masks.split(&zeroed).unwrap();

        let loss = |m: &Mat| {
            let mut by_t = BTreeMap::new();
            by_t.insert(1, m.clone());
            task_loss_value(&batch, &by_t, &params).unwrap()
        };
        assert_eq!(loss(&h_i), loss(&h_i_zeroed));
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let g = link_fixture(7);
        let tc = small_tc(&g);
        let g_train = g.prefix(tc.split.train.1);
        let params = init_all_params(&tc, &g).unwrap();

        // Freeze all discrete artifacts from the initial parameters.
        let h = encoder::encode(&g_train, &tc.encoder, &params).unwrap();
        let freeze = build_freeze(&g_train, &h, &params, &tc, 77).unwrap();
        assert_eq!(freeze.splices.len(), tc.rounds);

        let report = gradient_check(&params, 1e-4, 1e-5, |tape, bound| {
            let enc = encoder::encode_on_tape(tape, bound, &g_train, &tc.encoder).unwrap();
            losses_on_tape(tape, bound, &enc, &freeze, &tc)
                .unwrap()
                .total
        });
        assert!(
            report.within(1e-3),
            "worst {} at {:?}: analytic {} vs numeric {} (rel {})",
            report.worst_param,
            report.worst_index,
            report.analytic,
            report.numeric,
            report.max_rel_err
        );
    }

    #[test]
    fn one_epoch_runs_and_produces_one_record() {
        let g = link_fixture(11);
        let tc = small_tc(&g);
        let out = train(&g, &tc).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.best_epoch, 1);
        assert!(out.history[0].l_task.is_finite());
        assert!(out.history[0].val_metric.is_finite());
        let csv = history_csv(&out.history);
        assert!(csv.starts_with("epoch,l_task,l_risk,l_svae,l_s,l_d,val_metric\n"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let g = link_fixture(13);
        let mut tc = small_tc(&g);
        tc.epochs = 3;
        let a = train(&g, &tc).unwrap();
        let b = train(&g, &tc).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);

        tc.seed = 6;
        tc.encoder.seed = 6;
        tc.esvae.seed = 6;
        let c = train(&g, &tc).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn ablations_drop_their_components() {
        let g = link_fixture(17);
        let mut tc = small_tc(&g);
        tc.ablation = Ablation::NoIntervention;
        let out = train(&g, &tc).unwrap();
        assert_eq!(out.history[0].l_risk, 0.0);
        assert!(out.history[0].l_svae != 0.0);

        tc.ablation = Ablation::NoEsvae;
        let out = train(&g, &tc).unwrap();
        assert_eq!(out.history[0].l_svae, 0.0);
        assert_eq!(out.history[0].l_s, 0.0);
        assert_eq!(out.history[0].l_d, 0.0);
    }

    /// Separable two-class toy: two feature blobs, intra-class edges.
    fn separable_node_graph() -> DynamicGraph {
        let n = 12;
        let t_len = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut snaps = Vec::new();
        for t in 1..=t_len {
            let feats = Mat::from_shape_fn((n, 4), |(v, _)| {
                let center = if v < 6 { 2.0 } else { -2.0 };
                center + rng.gen_range(-0.2..0.2)
            });
            let mut edges = Vec::new();
            for i in 0..6 {
                edges.push((i, (i + 1) % 6));
                edges.push((6 + i, 6 + (i + 1) % 6));
            }
            snaps.push(Snapshot::new(t, n, edges, feats));
        }
        let mut labels = Vec::new();
        for t in 1..=t_len {
            for v in 0..n {
                labels.push(ClassLabel {
                    v,
                    t,
                    class: if v < 6 { 1 } else { 2 },
                });
            }
        }
        DynamicGraph::new(
            n,
            4,
            snaps,
            TaskKind::NodeClass,
            Some(LabelSet::NodeClass(labels)),
        )
    }

    #[test]
    fn separable_toy_reaches_high_training_accuracy() {
        let g = separable_node_graph();
        let mut cfg = Config::new();
        cfg.set("hidden_dim", 8);
        cfg.set("attention_heads", 2);
        cfg.set("encoder_layers", 1);
        cfg.set("static_dim", 3);
        cfg.set("dynamic_dim", 3);
        cfg.set("decoder_hidden", 6);
        cfg.set("clusters", 2);
        cfg.set("top_k", 1);
        cfg.set("intervention_rounds", 2);
        cfg.set("generated_count", 2);
        cfg.set("epochs", 200);
        cfg.set("learning_rate", 0.02);
        cfg.set("train_range", "1..1");
        cfg.set("val_range", "2..2");
        cfg.set("test_range", "3..3");
        cfg.set("seed", 3);
        let tc = TrainConfig::from_config(&cfg, g.feature_dim()).unwrap();
        let out = train(&g, &tc).unwrap();
        let train_acc = evaluate_metric(&g, &tc, &out.final_params, &[1]).unwrap();
        assert!(
            train_acc >= 0.95,
            "training accuracy {train_acc} after {} epochs",
            tc.epochs
        );
    }

    /// Mid-size configuration for the synthetic-suite trend tests.
    fn suite_tc(
        g: &DynamicGraph,
        split: &crate::graph::TemporalSplit,
        seed: u64,
        epochs: usize,
    ) -> TrainConfig {
        let mut cfg = Config::new();
        cfg.set("epochs", epochs);
        cfg.set("learning_rate", 0.01);
        cfg.set("hidden_dim", 16);
        cfg.set("attention_heads", 2);
        cfg.set("encoder_layers", 1);
        cfg.set("static_dim", 8);
        cfg.set("dynamic_dim", 8);
        cfg.set("decoder_hidden", 16);
        cfg.set("clusters", 6);
        cfg.set("top_k", 2);
        cfg.set("intervention_rounds", 3);
        cfg.set("generated_count", 6);
        cfg.set("seed", seed);
        cfg.set("train_range", format!("{}..{}", split.train.0, split.train.1));
        cfg.set("val_range", format!("{}..{}", split.val.0, split.val.1));
        cfg.set("test_range", format!("{}..{}", split.test.0, split.test.1));
        TrainConfig::from_config(&cfg, g.feature_dim()).unwrap()
    }

    #[test]
    fn task_loss_trends_downward_on_every_synthetic_suite() {
        use crate::synthetic::{
            gen_env_suite, gen_feature_shift, gen_sbm_node_cls, EnvMode, EnvSuiteSpec,
            FeatureShiftSpec, SbmSpec,
        };
        let median = |xs: &[f64]| -> f64 {
            let mut s = xs.to_vec();
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        };
        for seed in [1u64, 2, 3] {
            let mut cases: Vec<(&str, DynamicGraph, crate::graph::TemporalSplit)> = Vec::new();
            let sbm = gen_sbm_node_cls(&SbmSpec {
                num_nodes: 90,
                t_len: 6,
                shift_level: 0.5,
                seed,
                ..SbmSpec::default()
            })
            .unwrap();
            cases.push(("sbm", sbm.graph, sbm.split));

            let base = gen_sbm_node_cls(&SbmSpec {
                num_nodes: 60,
                t_len: 7,
                shift_level: 0.3,
                seed,
                ..SbmSpec::default()
            })
            .unwrap();
            let shifted = gen_feature_shift(
                &base.graph,
                &FeatureShiftSpec {
                    dim: 8,
                    max_iters: 200,
                    seed,
                    ..FeatureShiftSpec::default()
                },
            )
            .unwrap();
            let split = crate::graph::TemporalSplit {
                train: (1, 3),
                val: (4, 4),
                test: (5, 6),
            };
            cases.push(("feature-shift", shifted.graph, split));

            for (name, mode, gamma_inv, gamma_dyn) in [
                ("stationary", EnvMode::Stationary, 0.5, 0.0),
                ("nonstationary", EnvMode::Nonstationary, 1.0, 0.5),
            ] {
                let env = gen_env_suite(&EnvSuiteSpec {
                    mode,
                    num_nodes: 60,
                    t_len: 6,
                    factors: 2,
                    gamma_inv,
                    gamma_dyn,
                    mean_degree: 6.0,
                    seed,
                    ..EnvSuiteSpec::default()
                })
                .unwrap();
                cases.push((name, env.graph, env.split));
            }

            for (name, graph, split) in cases {
                let tc = suite_tc(&graph, &split, seed, 20);
                let out = train(&graph, &tc).unwrap();
                let losses: Vec<f64> = out.history.iter().map(|r| r.l_task).collect();
                let early = median(&losses[..10]);
                let late = median(&losses[10..]);
                assert!(
                    late < early,
                    "{name} seed {seed}: task loss medians early {early} late {late}"
                );
            }
        }
    }

    #[test]
    fn risk_weight_shrinks_the_generalization_gap_on_average() {
        use crate::synthetic::{gen_env_suite, EnvMode, EnvSuiteSpec};
        let mut gaps = [0.0f64; 2];
        for seed in [5u64, 6, 7] {
            let data = gen_env_suite(&EnvSuiteSpec {
                mode: EnvMode::Nonstationary,
                num_nodes: 120,
                t_len: 7,
                gamma_dyn: 0.6,
                seed,
                ..EnvSuiteSpec::default()
            })
            .unwrap();
            for (i, beta1) in [500.0f64, 0.0].iter().enumerate() {
                let mut tc = suite_tc(&data.graph, &data.split, seed, 30);
                tc.beta1 = *beta1;
                if *beta1 == 0.0 {
                    tc.ablation = Ablation::NoIntervention;
                }
                let out = train(&data.graph, &tc).unwrap();
                let tr: Vec<usize> = tc.split.train_timestamps().collect();
                let te: Vec<usize> = tc.split.test_timestamps().collect();
                let train_auc = evaluate_metric(&data.graph, &tc, &out.params, &tr).unwrap();
                let test_auc = evaluate_metric(&data.graph, &tc, &out.params, &te).unwrap();
                gaps[i] += (train_auc - test_auc) / 3.0;
            }
        }
        assert!(
            gaps[0] <= gaps[1],
            "mean train-test gap with the risk term {} vs without {}",
            gaps[0],
            gaps[1]
        );
    }

    #[test]
    fn predict_returns_probabilities_and_distributions() {
        let g = link_fixture(23);
        let tc = small_tc(&g);
        let out = train(&g, &tc).unwrap();
        let scores = predict(
            &g,
            &tc,
            &out.params,
            &Query::Links(vec![(0, 1), (1, 0), (2, 5)]),
        )
        .unwrap();
        let Scores::Links(probs) = scores else { unreachable!() };
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        // Dot-product scorer is symmetric.
        assert_eq!(probs[0], probs[1]);
        assert!(matches!(
            predict(&g, &tc, &out.params, &Query::Links(vec![(0, 99)])),
            Err(Error::Index(_))
        ));

        let gn = separable_node_graph();
        let mut cfg = Config::new();
        cfg.set("hidden_dim", 8);
        cfg.set("attention_heads", 2);
        cfg.set("encoder_layers", 1);
        cfg.set("static_dim", 3);
        cfg.set("dynamic_dim", 3);
        cfg.set("decoder_hidden", 6);
        cfg.set("clusters", 2);
        cfg.set("top_k", 1);
        cfg.set("intervention_rounds", 2);
        cfg.set("generated_count", 2);
        cfg.set("epochs", 1);
        cfg.set("train_range", "1..1");
        cfg.set("val_range", "2..2");
        cfg.set("test_range", "3..3");
        let tcn = TrainConfig::from_config(&cfg, gn.feature_dim()).unwrap();
        let outn = train(&gn, &tcn).unwrap();
        let Scores::Classes(dists) =
            predict(&gn, &tcn, &outn.params, &Query::Nodes(vec![0, 7])).unwrap()
        else {
            unreachable!()
        };
        for dist in dists {
            let sum: f64 = dist.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut params = ParamStore::new();
        params.insert("w", Mat::from_elem((1, 2), 1.0));
        let mut adam = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Mat::from_shape_vec((1, 2), vec![1.0, -1.0]).unwrap());
        adam.step(&mut params, &grads);
        let w = params.get("w");
        assert!(w[(0, 0)] < 1.0);
        assert!(w[(0, 1)] > 1.0);
    }
}
