//! Node-wise causal interventions on variant representation dimensions.
//!
//! A sample library collects candidate replacement vectors: every node
//! representation from the current encoder pass (observed) plus decoder
//! outputs sampled from the environment prior (generated). Each intervention
//! round splices library samples into the variant dimensions of selected
//! nodes and re-evaluates the task loss; the risk loss is the population
//! variance of the per-round losses. A model whose predictions rest only on
//! invariant dimensions is indifferent to the splices, so its risk loss
//! vanishes.
//!
//! Replacements are detached: gradients never flow into the spliced values,
//! only through the coordinates that were kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::NodeRepresentationSequence;
use crate::invariance::MaskPair;
use crate::tensor::{Mat, Tape, Tid};
use crate::{Error, Result};

/// Where a replacement vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Index into the observed pool.
    Observed(usize),
    /// Index into the generated pool.
    Generated(usize),
}

impl Provenance {
    fn label(&self) -> &'static str {
        match self {
            Provenance::Observed(_) => "observed",
            Provenance::Generated(_) => "generated",
        }
    }

    fn index(&self) -> usize {
        match self {
            Provenance::Observed(i) | Provenance::Generated(i) => *i,
        }
    }
}

/// Pool of replacement candidates, each tagged with its source timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLibrary {
    observed: Vec<(Vec<f64>, usize)>,
    generated: Vec<(Vec<f64>, usize)>,
    seed: u64,
}

impl SampleLibrary {
    /// Creates an empty library; draws made through it derive from `seed`.
    pub fn new(seed: u64) -> Self {
        Self {
            observed: Vec::new(),
            generated: Vec::new(),
            seed,
        }
    }

    pub fn observed(&self) -> &[(Vec<f64>, usize)] {
        &self.observed
    }

    pub fn generated(&self) -> &[(Vec<f64>, usize)] {
        &self.generated
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Replaces the generated pool (refreshed once per epoch).
    pub fn set_generated(&mut self, generated: Vec<(Vec<f64>, usize)>) {
        self.generated = generated;
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty() && self.generated.is_empty()
    }

    pub fn len(&self) -> usize {
        self.observed.len() + self.generated.len()
    }

    /// Resolves a provenance tag to the underlying sample.
    pub fn sample(&self, p: Provenance) -> &(Vec<f64>, usize) {
        match p {
            Provenance::Observed(i) => &self.observed[i],
            Provenance::Generated(i) => &self.generated[i],
        }
    }

    /// Checks finiteness and dimensional consistency of every entry.
    pub fn validate(&self) -> Result<()> {
        let dim = self
            .observed
            .iter()
            .chain(&self.generated)
            .map(|(v, _)| v.len())
            .next();
        for (kind, pool) in [("observed", &self.observed), ("generated", &self.generated)] {
            for (i, (v, _)) in pool.iter().enumerate() {
                if Some(v.len()) != dim {
                    return Err(Error::Contract(format!(
                        "{kind} sample {i} has dimension {} but the library uses {:?}",
                        v.len(),
                        dim
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "{kind} sample {i} contains a non-finite entry"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Flattens the current encoder pass into the observed pool: one tagged
/// vector per (node, timestamp).
pub fn build_observed_library(h: &NodeRepresentationSequence, seed: u64) -> SampleLibrary {
    let mut lib = SampleLibrary::new(seed);
    for t in 1..=h.len() {
        let m = h.at(t);
        for v in 0..m.nrows() {
            lib.observed.push((m.row(v).to_vec(), t));
        }
    }
    lib
}

/// Which nodes are intervened, at which timestamps, and how many rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionPlan {
    /// `(node, timestamp)` pairs whose variant dimensions get replaced.
    pub targets: Vec<(usize, usize)>,
    /// Number of independent intervention rounds S.
    pub rounds: usize,
    /// Restrict draws to samples tagged with the target's timestamp.
    pub match_timestamp: bool,
    /// Probability of drawing from the generated pool (when nonempty).
    pub generated_fraction: f64,
}

impl InterventionPlan {
    /// Default plan: every node at the final timestamp, even sourcing from
    /// both pools.
    pub fn full_final_timestamp(num_nodes: usize, final_t: usize, rounds: usize) -> Self {
        Self {
            targets: (0..num_nodes).map(|v| (v, final_t)).collect(),
            rounds,
            match_timestamp: false,
            generated_fraction: 0.5,
        }
    }

    /// Plan targeting a random fraction of nodes at the final timestamp.
    pub fn sampled(
        num_nodes: usize,
        final_t: usize,
        ratio: f64,
        rounds: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let count = ((num_nodes as f64 * ratio).round() as usize).min(num_nodes);
        let mut picked: Vec<usize> = (0..num_nodes).collect();
        // Partial Fisher-Yates: the first `count` entries are a uniform draw.
        for i in 0..count {
            let j = rng.gen_range(i..num_nodes);
            picked.swap(i, j);
        }
        let mut targets: Vec<(usize, usize)> =
            picked[..count].iter().map(|&v| (v, final_t)).collect();
        targets.sort_unstable();
        Self {
            targets,
            rounds,
            match_timestamp: false,
            generated_fraction: 0.5,
        }
    }

    /// Checks targets against graph bounds and that the round count gives a
    /// defined variance.
    pub fn validate(&self, num_nodes: usize, num_timestamps: usize) -> Result<()> {
        if self.rounds < 2 {
            return Err(Error::Config(format!(
                "risk variance needs at least 2 rounds, got {}",
                self.rounds
            )));
        }
        if !(0.0..=1.0).contains(&self.generated_fraction) {
            return Err(Error::Config(format!(
                "generated fraction must lie in [0, 1], got {}",
                self.generated_fraction
            )));
        }
        for &(v, t) in &self.targets {
            if v >= num_nodes || t == 0 || t > num_timestamps {
                return Err(Error::Contract(format!(
                    "intervention target (node {v}, t {t}) outside {num_nodes} nodes, \
                     1..={num_timestamps}"
                )));
            }
        }
        Ok(())
    }
}

/// Splices `s` into `h` on the variant index set, leaving all other
/// coordinates bit-identical.
pub fn intervene(h: &[f64], p_v: &[usize], s: &[f64]) -> Result<Vec<f64>> {
    if s.len() != h.len() {
        return Err(Error::Contract(format!(
            "replacement dimension {} does not match representation dimension {}",
            s.len(),
            h.len()
        )));
    }
    let mut out = h.to_vec();
    for &dim in p_v {
        if dim >= h.len() {
            return Err(Error::Contract(format!(
                "variant index {dim} out of range for dimension {}",
                h.len()
            )));
        }
        out[dim] = s[dim];
    }
    Ok(out)
}

/// One replacement decision inside a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub node: usize,
    pub timestamp: usize,
    pub source: Provenance,
}

/// All replacement decisions for the S rounds, drawn up front so rounds are
/// reproducible and independent.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundDraws {
    pub rounds: Vec<Vec<Draw>>,
}

/// Draws every round's replacement sources from the library.
///
/// Each target independently picks a pool — generated with probability
/// `generated_fraction` when that pool is nonempty, observed otherwise —
/// then a uniform sample within it. With `match_timestamp`, draws restrict
/// to samples tagged with the target's timestamp, falling back to the whole
/// pool when no tag matches.
pub fn draw_rounds(library: &SampleLibrary, plan: &InterventionPlan) -> Result<RoundDraws> {
    if library.is_empty() {
        return Err(Error::Config(
            "intervention requires a nonempty sample library".into(),
        ));
    }
    library.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(library.seed());
    let mut rounds = Vec::with_capacity(plan.rounds);
    for _ in 0..plan.rounds {
        let mut draws = Vec::with_capacity(plan.targets.len());
        for &(node, timestamp) in &plan.targets {
            let use_generated = !library.generated.is_empty()
                && (library.observed.is_empty()
                    || rng.gen_bool(plan.generated_fraction));
            let pool = if use_generated {
                &library.generated
            } else {
                &library.observed
            };
            let candidates: Vec<usize> = if plan.match_timestamp {
                let same_t: Vec<usize> = pool
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, t))| *t == timestamp)
                    .map(|(i, _)| i)
                    .collect();
                if same_t.is_empty() {
                    (0..pool.len()).collect()
                } else {
                    same_t
                }
            } else {
                (0..pool.len()).collect()
            };
            let pick = candidates[rng.gen_range(0..candidates.len())];
            let source = if use_generated {
                Provenance::Generated(pick)
            } else {
                Provenance::Observed(pick)
            };
            draws.push(Draw {
                node,
                timestamp,
                source,
            });
        }
        rounds.push(draws);
    }
    Ok(RoundDraws { rounds })
}

/// Per-timestamp splice masks for one round: `keep` is 1 on coordinates
/// that survive, `patch` carries the replacement values on spliced
/// coordinates and 0 elsewhere. The intervened matrix is
/// `h ⊙ keep + patch`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpliceMaps {
    pub timestamp: usize,
    pub keep: Mat,
    pub patch: Mat,
}

/// Materializes a round's draws into per-timestamp splice maps.
pub fn splice_maps(
    h: &NodeRepresentationSequence,
    masks: &MaskPair,
    cutoff: f64,
    library: &SampleLibrary,
    draws: &[Draw],
) -> Result<Vec<SpliceMaps>> {
    let d = h.dim();
    let mut by_t: Vec<SpliceMaps> = Vec::new();
    for draw in draws {
        let (sample, _) = library.sample(draw.source);
        if sample.len() != d {
            return Err(Error::Contract(format!(
                "library sample dimension {} does not match representations ({d})",
                sample.len()
            )));
        }
        let (_, p_v) = masks.pattern_indices(draw.node, cutoff)?;
        let maps = match by_t.iter_mut().find(|m| m.timestamp == draw.timestamp) {
            Some(m) => m,
            None => {
                by_t.push(SpliceMaps {
                    timestamp: draw.timestamp,
                    keep: Mat::ones((h.node_count(), d)),
                    patch: Mat::zeros((h.node_count(), d)),
                });
                by_t.last_mut().expect("just pushed")
            }
        };
        for &dim in &p_v {
            maps.keep[(draw.node, dim)] = 0.0;
            maps.patch[(draw.node, dim)] = sample[dim];
        }
    }
    by_t.sort_by_key(|m| m.timestamp);
    Ok(by_t)
}

/// Applies one splice map to a representation matrix on the tape. The keep
/// mask and patch are constants, so gradients flow only through kept
/// coordinates.
pub fn splice_on_tape(tape: &mut Tape, h_t: Tid, maps: &SpliceMaps) -> Tid {
    let keep = tape.constant(maps.keep.clone());
    let patch = tape.constant(maps.patch.clone());
    let kept = tape.mul(h_t, keep);
    tape.add(kept, patch)
}

/// Population variance of per-round losses on the tape.
pub fn risk_variance_on_tape(tape: &mut Tape, round_losses: &[Tid]) -> Tid {
    assert!(
        round_losses.len() >= 2,
        "risk variance needs at least two rounds"
    );
    let stacked = tape.stack_rows(round_losses);
    let mean = tape.mean_all(stacked);
    let neg_mean = tape.neg(mean);
    let centered = tape.add_row(stacked, neg_mean);
    let sq = tape.mul(centered, centered);
    tape.mean_all(sq)
}

/// Population variance of plain values.
pub fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// One audit row: which sample replaced which node in which round.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub node: usize,
    pub timestamp: usize,
    pub source_kind: &'static str,
    pub source_index: usize,
    pub round_loss: f64,
}

/// Risk loss result with its audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskOutcome {
    /// Population variance of the per-round losses.
    pub loss: f64,
    pub round_losses: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

impl RiskOutcome {
    /// Renders the audit trail as CSV.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("round,node,timestamp,source,source_index,round_loss\n");
        for row in &self.trace {
            out.push_str(&format!(
                "{},{},{},{},{},{:?}\n",
                row.round, row.node, row.timestamp, row.source_kind, row.source_index,
                row.round_loss
            ));
        }
        out
    }
}

/// Computes the risk loss: S rounds of splicing library samples into the
/// variant dimensions of the plan's targets, re-evaluating the task loss on
/// each intervened copy, and returning the population variance of the
/// per-round losses.
pub fn risk_loss<F>(
    h: &NodeRepresentationSequence,
    masks: &MaskPair,
    cutoff: f64,
    library: &SampleLibrary,
    plan: &InterventionPlan,
    mut task: F,
) -> Result<RiskOutcome>
where
    F: FnMut(&NodeRepresentationSequence) -> Result<f64>,
{
    plan.validate(h.node_count(), h.len())?;
    let draws = draw_rounds(library, plan)?;
    let mut round_losses = Vec::with_capacity(plan.rounds);
    let mut trace = Vec::new();
    for (round, round_draws) in draws.rounds.iter().enumerate() {
        let maps = splice_maps(h, masks, cutoff, library, round_draws)?;
        let mut values: Vec<Mat> = (1..=h.len()).map(|t| h.at(t).clone()).collect();
        for m in &maps {
            let spliced = &values[m.timestamp - 1] * &m.keep + &m.patch;
            values[m.timestamp - 1] = spliced;
        }
        let intervened = NodeRepresentationSequence::new(values, "intervention".into());
        let loss = task(&intervened)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "task loss in intervention round {round} is not finite"
            )));
        }
        for d in round_draws {
            trace.push(TraceRow {
                round,
                node: d.node,
                timestamp: d.timestamp,
                source_kind: d.source.label(),
                source_index: d.source.index(),
                round_loss: loss,
            });
        }
        round_losses.push(loss);
    }
    Ok(RiskOutcome {
        loss: population_variance(&round_losses),
        round_losses,
        trace,
    })
}
