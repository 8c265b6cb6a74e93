//! Single-layer LSTM cell composed from tape operations.
//!
//! Weights for all four gates live in one `(in_dim + hidden) x 4*hidden`
//! matrix (gate order: input, forget, cell, output) with a `1 x 4*hidden`
//! bias, so a cell contributes exactly two named parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{BoundParams, Mat, ParamStore, Tape, Tid};

/// Names of the two parameters backing one cell.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub weight: String,
    pub bias: String,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(prefix: &str, hidden: usize) -> Self {
        Self {
            weight: format!("{prefix}.lstm_w"),
            bias: format!("{prefix}.lstm_b"),
            hidden,
        }
    }

    /// Insert freshly initialized cell parameters into `params`.
    pub fn init(&self, params: &mut ParamStore, input_dim: usize, rng: &mut ChaCha8Rng) {
        let rows = input_dim + self.hidden;
        let cols = 4 * self.hidden;
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        params.insert(
            self.weight.clone(),
            Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit)),
        );
        params.insert(self.bias.clone(), Mat::zeros((1, cols)));
    }

    /// One step: `(x, h, c) -> (h', c')`, all `1 x *` rows on the tape.
    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Tid,
        h: Tid,
        c: Tid,
    ) -> (Tid, Tid) {
        let hd = self.hidden;
        let w = bound.id(&self.weight);
        let b = bound.id(&self.bias);
        let xh = tape.concat_cols(x, h);
        let lin = tape.matmul(xh, w);
        let gates = tape.add_row(lin, b);
        let i_raw = tape.slice_cols(gates, 0, hd);
        let f_raw = tape.slice_cols(gates, hd, hd);
        let g_raw = tape.slice_cols(gates, 2 * hd, hd);
        let o_raw = tape.slice_cols(gates, 3 * hd, hd);
        let i = tape.sigmoid(i_raw);
        let f = tape.sigmoid(f_raw);
        let g = tape.tanh(g_raw);
        let o = tape.sigmoid(o_raw);
        let keep = tape.mul(f, c);
        let write = tape.mul(i, g);
        let c_next = tape.add(keep, write);
        let c_act = tape.tanh(c_next);
        let h_next = tape.mul(o, c_act);
        (h_next, c_next)
    }

    /// Run the cell over a sequence, returning the hidden state after
    /// every step.
    pub fn run(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inputs: &[Tid],
        h0: Tid,
        c0: Tid,
    ) -> Vec<Tid> {
        let mut hs = Vec::with_capacity(inputs.len());
        let (mut h, mut c) = (h0, c0);
        for &x in inputs {
            let (h2, c2) = self.step(tape, bound, x, h, c);
            h = h2;
            c = c2;
            hs.push(h);
        }
        hs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::default_gradient_check;
    use rand::SeedableRng;

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let cell = LstmCell::new("test", 3);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        cell.init(&mut params, 2, &mut rng);
        params.insert("test.h0", Mat::zeros((1, 3)));
        params.insert("test.c0", Mat::zeros((1, 3)));
        let xs: Vec<Mat> = (0..4)
            .map(|i| Mat::from_shape_fn((1, 2), |(_, j)| 0.3 * (i as f64) - 0.2 * (j as f64)))
            .collect();
        let report = default_gradient_check(&params, |tape, bound| {
            let inputs: Vec<Tid> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let hs = cell.run(
                tape,
                bound,
                &inputs,
                bound.id("test.h0"),
                bound.id("test.c0"),
            );
            let mut acc = None;
            for (k, h) in hs.iter().enumerate() {
                let weighted = tape.scale(*h, 1.0 + 0.5 * k as f64);
                let s = tape.sum_all(weighted);
                acc = Some(match acc {
                    Some(a) => tape.add(a, s),
                    None => s,
                });
            }
            acc.unwrap()
        });
        assert!(report.within(1e-4), "rel err {}", report.max_rel_err);
    }

    #[test]
    fn state_accumulates_across_steps() {
        let cell = LstmCell::new("t", 2);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        cell.init(&mut params, 2, &mut rng);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x1 = tape.constant(Mat::from_elem((1, 2), 0.5));
        let x2 = tape.constant(Mat::from_elem((1, 2), -0.25));
        let zero = tape.constant(Mat::zeros((1, 2)));
        // Same input fed at step 1 vs step 2 produces different hidden
        // states because the cell state carries history.
        let hs_a = cell.run(&mut tape, &bound, &[x1, x2], zero, zero);
        let hs_b = cell.run(&mut tape, &bound, &[x2], zero, zero);
        assert_ne!(tape.value(hs_a[1]), tape.value(hs_b[0]));
    }
}
