//! Invariant pattern recognition over node representations.
//!
//! Each representation dimension is classified as *invariant* (stable across
//! a node's history) or *variant*. A binary gate marks the stable dimensions
//! — those whose population variance over the history stays at or below a
//! threshold — and a single learnable weight vector, squashed through a
//! sigmoid, softens the gate into a mask `M_I ∈ [0, 1]`. The variant mask is
//! the exact complement `M_V = 1 − M_I`, so splitting a representation along
//! the two masks always reassembles to the original vector.
//!
//! Gates are recomputed from data (typically once per epoch) and never
//! trained; the weight vector is the only trainable piece and is shared
//! across nodes.

use ndarray::Axis;

use crate::encoder::NodeRepresentationSequence;
use crate::tensor::{BoundParams, Mat, ParamStore, Tape, Tid};
use crate::{Error, Result};

/// Name of the shared invariant weight vector in a parameter store.
pub const WEIGHT_NAME: &str = "inv.w_i";

/// Stabilizer used when normalizing representation rows.
const LAYER_NORM_EPS: f64 = 1e-5;

/// Settings controlling gate construction and mask thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceConfig {
    /// Variance threshold: a dimension gates to 1 when its history variance
    /// is at or below this value.
    pub delta: f64,
    /// Soft-mask threshold separating invariant from variant dimension
    /// indices.
    pub cutoff: f64,
    /// Layer-normalize each history row before measuring variance, making
    /// the threshold scale-free.
    pub normalize: bool,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            cutoff: 0.5,
            normalize: true,
        }
    }
}

impl InvarianceConfig {
    /// Checks threshold ranges.
    pub fn validate(&self) -> Result<()> {
        if self.delta < 0.0 {
            return Err(Error::Config(format!(
                "variance threshold must be nonnegative, got {}",
                self.delta
            )));
        }
        if !(0.0 < self.cutoff && self.cutoff < 1.0) {
            return Err(Error::Config(format!(
                "mask cutoff must lie in (0, 1), got {}",
                self.cutoff
            )));
        }
        Ok(())
    }
}

/// Creates the parameter store holding the shared weight vector.
///
/// The vector starts at zero, so the initial soft mask is 0.5 on every gated
/// dimension — neutral between keeping and discarding.
pub fn init_params(repr_dim: usize) -> Result<ParamStore> {
    if repr_dim == 0 {
        return Err(Error::Config("representation dimension must be positive".into()));
    }
    let mut store = ParamStore::new();
    store.insert(WEIGHT_NAME, Mat::zeros((1, repr_dim)));
    Ok(store)
}

/// Complementary soft masks over representation dimensions, per node.
///
/// `invariant() + variant() == 1` holds element-wise exactly because the
/// variant mask is stored as `1 − M_I`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    gate: Mat,
    m_i: Mat,
    m_v: Mat,
}

impl MaskPair {
    /// Binary stability gates, one row per node.
    pub fn gate(&self) -> &Mat {
        &self.gate
    }

    /// Soft invariant mask `M_I = gate ⊙ sigmoid(W_I)`.
    pub fn invariant(&self) -> &Mat {
        &self.m_i
    }

    /// Soft variant mask `M_V = 1 − M_I`.
    pub fn variant(&self) -> &Mat {
        &self.m_v
    }

    /// Number of nodes covered by the masks.
    pub fn num_nodes(&self) -> usize {
        self.gate.nrows()
    }

    /// Representation dimensionality.
    pub fn repr_dim(&self) -> usize {
        self.gate.ncols()
    }

    /// Splits a representation matrix into invariant and variant parts.
    ///
    /// The two parts sum back to the input (up to rounding in the products).
    pub fn split(&self, h: &Mat) -> Result<(Mat, Mat)> {
        if h.dim() != self.m_i.dim() {
            return Err(Error::Contract(format!(
                "representation shape {:?} does not match mask shape {:?}",
                h.dim(),
                self.m_i.dim()
            )));
        }
        Ok((h * &self.m_i, h * &self.m_v))
    }

    /// Partitions one node's dimensions into invariant and variant index
    /// sets: invariant where `M_I > cutoff`, variant elsewhere.
    pub fn pattern_indices(&self, node: usize, cutoff: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        if node >= self.num_nodes() {
            return Err(Error::Index(format!(
                "node {node} out of range for {} masked nodes",
                self.num_nodes()
            )));
        }
        let row = self.m_i.row(node);
        let mut p_i = Vec::new();
        let mut p_v = Vec::new();
        for (dim, &m) in row.iter().enumerate() {
            if m > cutoff {
                p_i.push(dim);
            } else {
                p_v.push(dim);
            }
        }
        Ok((p_i, p_v))
    }

    /// Renders the invariant mask as a whitespace-separated text matrix,
    /// one node per line.
    pub fn invariant_text(&self) -> String {
        let mut out = String::new();
        for row in self.m_i.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Layer-normalizes each row to zero mean and unit variance.
pub fn layer_normalize_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let denom = (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) / denom);
    }
    out
}

/// Computes one node's binary stability gate from its `t × d'` history.
///
/// A dimension gates to 1 when the population variance of its history values
/// is at or below `delta`. A single-row history always gates to all-ones.
pub fn init_invariant_gate(history: &Mat, delta: f64) -> Result<Vec<f64>> {
    if history.nrows() == 0 {
        return Err(Error::Contract(
            "gate initialization requires at least one history entry".into(),
        ));
    }
    let t = history.nrows() as f64;
    let mean = history.mean_axis(Axis(0)).expect("nonempty history");
    let gate = history
        .columns()
        .into_iter()
        .zip(mean.iter())
        .map(|(col, &mu)| {
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / t;
            if var <= delta {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(gate)
}

/// Computes stability gates for every node from representation history up
/// to and including timestamp `upto_t`.
///
/// With `normalize` set, each node's history rows are layer-normalized
/// before the variance test, making `delta` comparable across scales.
pub fn gates_from_history(
    h: &NodeRepresentationSequence,
    upto_t: usize,
    cfg: &InvarianceConfig,
) -> Result<Mat> {
    if upto_t == 0 || upto_t > h.len() {
        return Err(Error::Contract(format!(
            "gate history bound {upto_t} outside 1..={}",
            h.len()
        )));
    }
    let n = h.node_count();
    let d = h.dim();
    let mut gates = Mat::zeros((n, d));
    for v in 0..n {
        let mut history = Mat::zeros((upto_t, d));
        for t in 1..=upto_t {
            history.row_mut(t - 1).assign(&h.at(t).row(v));
        }
        if cfg.normalize {
            history = layer_normalize_rows(&history);
        }
        let gate = init_invariant_gate(&history, cfg.delta)?;
        for (dim, g) in gate.into_iter().enumerate() {
            gates[(v, dim)] = g;
        }
    }
    Ok(gates)
}

/// Builds the mask pair from per-node gates and the shared weight vector.
pub fn masks(gates: &Mat, weights: &Mat) -> Result<MaskPair> {
    if weights.nrows() != 1 || weights.ncols() != gates.ncols() {
        return Err(Error::Contract(format!(
            "weight shape {:?} must be 1 × {} to match the gates",
            weights.dim(),
            gates.ncols()
        )));
    }
    if gates.iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(Error::Contract("gate entries must be binary".into()));
    }
    let sig = weights.mapv(|w| 1.0 / (1.0 + (-w).exp()));
    let mut m_i = gates.clone();
    for mut row in m_i.rows_mut() {
        for (cell, &s) in row.iter_mut().zip(sig.row(0)) {
            *cell *= s;
        }
    }
    let m_v = m_i.mapv(|m| 1.0 - m);
    Ok(MaskPair {
        gate: gates.clone(),
        m_i,
        m_v,
    })
}

/// Convenience: gates from history plus masks from a parameter store.
pub fn masks_from_history(
    h: &NodeRepresentationSequence,
    upto_t: usize,
    cfg: &InvarianceConfig,
    params: &ParamStore,
) -> Result<MaskPair> {
    let gates = gates_from_history(h, upto_t, cfg)?;
    masks(&gates, params.get(WEIGHT_NAME))
}

/// Applies the soft invariant mask to a representation matrix on the tape,
/// keeping the weight vector differentiable while the gate stays constant.
pub fn masked_invariant_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    h_t: Tid,
    gates: &Mat,
) -> Tid {
    let w = bound.id(WEIGHT_NAME);
    let sig = tape.sigmoid(w);
    let gate_c = tape.constant(gates.clone());
    let m_i = tape.mul_row(gate_c, sig);
    tape.mul(h_t, m_i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::default_gradient_check;
    use ndarray::array;
    use proptest::prelude::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn gate_examples() {
        // Constant history: zero variance on every dimension.
        let constant = Mat::from_elem((4, 3), 0.7);
        assert_eq!(init_invariant_gate(&constant, 0.0).unwrap(), vec![1.0; 3]);

        // Single entry: variance is zero by definition.
        let single = array![[5.0, -2.0]];
        assert_eq!(init_invariant_gate(&single, 0.1).unwrap(), vec![1.0, 1.0]);

        // Population variance of {0, 2} is 1 > 0.5; second dim is constant.
        let hist = array![[0.0, 0.0], [2.0, 0.0]];
        assert_eq!(init_invariant_gate(&hist, 0.5).unwrap(), vec![0.0, 1.0]);

        assert!(init_invariant_gate(&Mat::zeros((0, 2)), 0.1).is_err());
    }

    #[test]
    fn mask_example_matches_hand_values() {
        let gates = array![[1.0, 0.0]];
        let weights = Mat::from_shape_vec((1, 2), vec![logit(0.8), logit(0.9)]).unwrap();
        let pair = masks(&gates, &weights).unwrap();
        assert!((pair.invariant()[(0, 0)] - 0.8).abs() < 1e-12);
        assert_eq!(pair.invariant()[(0, 1)], 0.0);
        assert!((pair.variant()[(0, 0)] - 0.2).abs() < 1e-12);
        assert_eq!(pair.variant()[(0, 1)], 1.0);
    }

    #[test]
    fn split_matches_hand_values() {
        let gates = array![[1.0, 0.0]];
        let weights = Mat::from_shape_vec((1, 2), vec![0.0, 3.0]).unwrap();
        let pair = masks(&gates, &weights).unwrap();
        // M_I = (0.5, 0) regardless of the second weight (gate is 0 there).
        let h = array![[2.0, 4.0]];
        let (h_i, h_v) = pair.split(&h).unwrap();
        assert_eq!(h_i, array![[1.0, 0.0]]);
        assert_eq!(h_v, array![[1.0, 4.0]]);

        assert!(pair.split(&Mat::zeros((2, 2))).is_err());
    }

    #[test]
    fn pattern_indices_threshold_and_degenerate_cases() {
        let gates = array![[1.0, 1.0]];
        let weights = Mat::from_shape_vec((1, 2), vec![logit(0.9), logit(0.1)]).unwrap();
        let pair = masks(&gates, &weights).unwrap();
        let (p_i, p_v) = pair.pattern_indices(0, 0.5).unwrap();
        assert_eq!(p_i, vec![0]);
        assert_eq!(p_v, vec![1]);

        // All-zero gate: every dimension is variant.
        let pair = masks(&array![[0.0, 0.0]], &weights).unwrap();
        let (p_i, p_v) = pair.pattern_indices(0, 0.5).unwrap();
        assert!(p_i.is_empty());
        assert_eq!(p_v, vec![0, 1]);

        assert!(pair.pattern_indices(1, 0.5).is_err());
    }

    #[test]
    fn layer_normalization_standardizes_rows() {
        let m = array![[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 10.0]];
        let out = layer_normalize_rows(&m);
        for row in out.rows() {
            let mean: f64 = row.sum() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
        // A constant row collapses to zeros instead of dividing by zero.
        assert!(out.row(1).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn gates_from_history_uses_only_the_prefix() {
        let cfg = InvarianceConfig {
            delta: 0.05,
            cutoff: 0.5,
            normalize: false,
        };
        // Node 0 dim 0 is stable for two steps then jumps at t=3.
        let values = vec![
            array![[1.0, 0.0]],
            array![[1.0, 5.0]],
            array![[9.0, 5.0]],
        ];
        let h = NodeRepresentationSequence::new(values, "test".into());
        let early = gates_from_history(&h, 2, &cfg).unwrap();
        assert_eq!(early[(0, 0)], 1.0);
        assert_eq!(early[(0, 1)], 0.0);
        let late = gates_from_history(&h, 3, &cfg).unwrap();
        assert_eq!(late[(0, 0)], 0.0);

        assert!(gates_from_history(&h, 0, &cfg).is_err());
        assert!(gates_from_history(&h, 4, &cfg).is_err());
    }

    #[test]
    fn gradient_flows_through_weights_only() {
        let gates = array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];
        let h = array![[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]];
        let params = init_params(3).unwrap();
        let report = default_gradient_check(&params, |tape, bound| {
            let h_c = tape.constant(h.clone());
            let masked = masked_invariant_on_tape(tape, bound, h_c, &gates);
            let sq = tape.mul(masked, masked);
            tape.sum_all(sq)
        });
        assert!(
            report.within(1e-3),
            "worst {} rel {}",
            report.worst_param,
            report.max_rel_err
        );
    }

    #[test]
    fn tape_mask_agrees_with_value_level_mask() {
        let gates = array![[1.0, 0.0], [1.0, 1.0]];
        let h = array![[2.0, -1.0], [0.5, 3.0]];
        let mut params = init_params(2).unwrap();
        *params.get_mut(WEIGHT_NAME) = Mat::from_shape_vec((1, 2), vec![0.4, -1.2]).unwrap();
        let pair = masks(&gates, params.get(WEIGHT_NAME)).unwrap();
        let (h_i, _) = pair.split(&h).unwrap();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h_c = tape.constant(h.clone());
        let masked = masked_invariant_on_tape(&mut tape, &bound, h_c, &gates);
        let on_tape = tape.value(masked);
        for (a, b) in h_i.iter().zip(on_tape.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation_rejects_bad_thresholds() {
        assert!(InvarianceConfig {
            delta: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(InvarianceConfig {
            cutoff: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(InvarianceConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn complement_is_exact(
            gates in proptest::collection::vec(proptest::bool::ANY, 12),
            weights in proptest::collection::vec(-6.0f64..6.0, 4),
        ) {
            let gate_m = Mat::from_shape_vec(
                (3, 4),
                gates.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            ).unwrap();
            let w = Mat::from_shape_vec((1, 4), weights).unwrap();
            let pair = masks(&gate_m, &w).unwrap();
            for (mi, mv) in pair.invariant().iter().zip(pair.variant().iter()) {
                prop_assert_eq!(mi + mv, 1.0);
            }
        }

        #[test]
        fn split_is_additive(
            gates in proptest::collection::vec(proptest::bool::ANY, 12),
            weights in proptest::collection::vec(-6.0f64..6.0, 4),
            h in proptest::collection::vec(-10.0f64..10.0, 12),
        ) {
            let gate_m = Mat::from_shape_vec(
                (3, 4),
                gates.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            ).unwrap();
            let w = Mat::from_shape_vec((1, 4), weights).unwrap();
            let h_m = Mat::from_shape_vec((3, 4), h).unwrap();
            let pair = masks(&gate_m, &w).unwrap();
            let (h_i, h_v) = pair.split(&h_m).unwrap();
            for ((a, b), orig) in h_i.iter().zip(h_v.iter()).zip(h_m.iter()) {
                prop_assert!((a + b - orig).abs() < 1e-7);
            }
        }

        #[test]
        fn pattern_indices_partition_dimensions(
            gates in proptest::collection::vec(proptest::bool::ANY, 8),
            weights in proptest::collection::vec(-6.0f64..6.0, 8),
            cutoff in 0.05f64..0.95,
        ) {
            let gate_m = Mat::from_shape_vec(
                (1, 8),
                gates.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            ).unwrap();
            let w = Mat::from_shape_vec((1, 8), weights).unwrap();
            let pair = masks(&gate_m, &w).unwrap();
            let (p_i, p_v) = pair.pattern_indices(0, cutoff).unwrap();
            let mut all: Vec<usize> = p_i.iter().chain(p_v.iter()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..8).collect::<Vec<_>>());
            prop_assert!(p_i.iter().all(|d| !p_v.contains(d)));
        }

        #[test]
        fn gate_is_monotone_in_delta(
            history in proptest::collection::vec(-5.0f64..5.0, 15),
            delta_low in 0.0f64..2.0,
            bump in 0.0f64..3.0,
        ) {
            let hist = Mat::from_shape_vec((5, 3), history).unwrap();
            let low = init_invariant_gate(&hist, delta_low).unwrap();
            let high = init_invariant_gate(&hist, delta_low + bump).unwrap();
            for (l, h) in low.iter().zip(high.iter()) {
                prop_assert!(l <= h, "raising delta must never drop a gate");
            }
        }
    }
}
