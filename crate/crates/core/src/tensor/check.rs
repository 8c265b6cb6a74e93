//! Central-finite-difference verification of tape gradients.
//!
//! Used by the test suites to compare analytic gradients against numeric
//! ones for every trainable parameter of a loss. The loss is supplied as
//! a closure that rebuilds the computation on a fresh tape, so any
//! stochastic inputs (noise draws, negative samples, masks) must be
//! frozen outside the closure — otherwise the numeric probe evaluates a
//! different function than the analytic pass.

use super::{BoundParams, ParamStore, Tape, Tid};

/// Worst observed analytic/numeric disagreement over all parameter entries.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Parameter with the largest relative error.
    pub worst_param: String,
    /// Entry within that parameter.
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// `|a - n| / max(|a|, |n|, floor)` maximized over all entries.
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn within(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Compare analytic gradients of `build` against central differences.
///
/// `build` must construct the scalar loss on the given tape from the bound
/// parameters, deterministically. `floor` guards the relative error against
/// division by near-zero gradients; entries where both sides are below it
/// in magnitude contribute `|a - n| / floor`.
pub fn gradient_check<F>(params: &ParamStore, eps: f64, floor: f64, build: F) -> GradCheck
where
    F: Fn(&mut Tape, &BoundParams) -> Tid,
{
    let eval = |p: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let loss = build(&mut tape, &bound);
        tape.scalar(loss)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = build(&mut tape, &bound);
    let grads = tape.backward(loss);
    let analytic = grads.named(&tape, &bound);

    let mut worst = GradCheck {
        worst_param: String::new(),
        worst_index: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        max_rel_err: 0.0,
    };

    let mut probe = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let dim = params.get(name).dim();
        for i in 0..dim.0 {
            for j in 0..dim.1 {
                let orig = params.get(name)[(i, j)];
                probe.get_mut(name)[(i, j)] = orig + eps;
                let up = eval(&probe);
                probe.get_mut(name)[(i, j)] = orig - eps;
                let down = eval(&probe);
                probe.get_mut(name)[(i, j)] = orig;

                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[name][(i, j)];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                if rel > worst.max_rel_err {
                    worst = GradCheck {
                        worst_param: name.clone(),
                        worst_index: (i, j),
                        analytic: a,
                        numeric,
                        max_rel_err: rel,
                    };
                }
            }
        }
    }
    worst
}

/// [`gradient_check`] with the step and floor used throughout this crate's
/// verification suites (`eps = 1e-4`, `floor = 1e-6`).
pub fn default_gradient_check<F>(params: &ParamStore, build: F) -> GradCheck
where
    F: Fn(&mut Tape, &BoundParams) -> Tid,
{
    gradient_check(params, 1e-4, 1e-6, build)
}
