use super::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.5..1.5))
}

/// Keep entries away from a kink at `at` so finite differences stay valid.
fn away_from(mut m: Mat, at: f64) -> Mat {
    m.mapv_inplace(|x| if (x - at).abs() < 0.05 { x + 0.1 } else { x });
    m
}

/// Reduce a matrix node to a scalar with non-uniform weights so every
/// entry's gradient is exercised independently.
fn weighted_sum(tape: &mut Tape, t: Tid, seed: u64) -> Tid {
    let dim = tape.value(t).dim();
    let w = tape.constant(rand_mat(dim.0, dim.1, seed));
    let prod = tape.mul(t, w);
    tape.sum_all(prod)
}

fn check_unary<F>(name: &str, input: Mat, f: F)
where
    F: Fn(&mut Tape, Tid) -> Tid,
{
    let mut params = ParamStore::new();
    params.insert("x", input);
    let report = default_gradient_check(&params, |tape, bound| {
        let y = f(tape, bound.id("x"));
        weighted_sum(tape, y, 99)
    });
    assert!(
        report.within(1e-5),
        "{name}: rel err {} at {:?} (analytic {}, numeric {})",
        report.max_rel_err,
        report.worst_index,
        report.analytic,
        report.numeric
    );
}

fn check_binary<F>(name: &str, a: Mat, b: Mat, f: F)
where
    F: Fn(&mut Tape, Tid, Tid) -> Tid,
{
    let mut params = ParamStore::new();
    params.insert("a", a);
    params.insert("b", b);
    let report = default_gradient_check(&params, |tape, bound| {
        let y = f(tape, bound.id("a"), bound.id("b"));
        weighted_sum(tape, y, 99)
    });
    assert!(
        report.within(1e-5),
        "{name}: rel err {} (analytic {}, numeric {})",
        report.max_rel_err,
        report.analytic,
        report.numeric
    );
}

#[test]
fn elementwise_arithmetic_grads() {
    check_binary("add", rand_mat(3, 4, 1), rand_mat(3, 4, 2), |t, a, b| {
        t.add(a, b)
    });
    check_binary("sub", rand_mat(3, 4, 3), rand_mat(3, 4, 4), |t, a, b| {
        t.sub(a, b)
    });
    check_binary("mul", rand_mat(3, 4, 5), rand_mat(3, 4, 6), |t, a, b| {
        t.mul(a, b)
    });
    check_unary("neg", rand_mat(3, 4, 7), |t, a| t.neg(a));
    check_unary("scale", rand_mat(3, 4, 8), |t, a| t.scale(a, -2.5));
}

#[test]
fn broadcast_row_grads() {
    check_binary("add_row", rand_mat(5, 3, 9), rand_mat(1, 3, 10), |t, a, r| {
        t.add_row(a, r)
    });
    check_binary(
        "mul_row",
        rand_mat(5, 3, 11),
        rand_mat(1, 3, 12),
        |t, a, r| t.mul_row(a, r),
    );
}

#[test]
fn matmul_grads() {
    check_binary(
        "matmul",
        rand_mat(4, 3, 13),
        rand_mat(3, 5, 14),
        |t, a, b| t.matmul(a, b),
    );
}

#[test]
fn nonlinearity_grads() {
    check_unary("relu", away_from(rand_mat(4, 4, 15), 0.0), |t, a| t.relu(a));
    check_unary("leaky_relu", away_from(rand_mat(4, 4, 16), 0.0), |t, a| {
        t.leaky_relu(a, 0.2)
    });
    check_unary("sigmoid", rand_mat(4, 4, 17), |t, a| t.sigmoid(a));
    check_unary("tanh", rand_mat(4, 4, 18), |t, a| t.tanh(a));
    check_unary("exp", rand_mat(4, 4, 19), |t, a| t.exp(a));
    check_unary("softplus", rand_mat(4, 4, 20), |t, a| t.softplus(a));
    let positive = rand_mat(4, 4, 21).mapv(|x| x.abs() + 0.3);
    check_unary("sqrt", positive, |t, a| t.sqrt(a));
    let clamp_in = away_from(away_from(rand_mat(4, 4, 22), -1.0), 1.0);
    check_unary("clamp", clamp_in, |t, a| t.clamp(a, -1.0, 1.0));
}

#[test]
fn reduction_grads() {
    check_unary("sum_all", rand_mat(3, 5, 23), |t, a| t.sum_all(a));
    check_unary("mean_all", rand_mat(3, 5, 24), |t, a| t.mean_all(a));
    check_unary("mean_rows", rand_mat(4, 3, 25), |t, a| t.mean_rows(a));
    check_unary("row_sums", rand_mat(4, 3, 26), |t, a| t.row_sums(a));
    check_unary("row_log_sum_exp", rand_mat(4, 6, 27), |t, a| {
        t.row_log_sum_exp(a)
    });
}

#[test]
fn indexing_grads() {
    check_unary("select_per_row", rand_mat(4, 3, 28), |t, a| {
        t.select_per_row(a, vec![2, 0, 1, 0])
    });
    // Duplicate gather indices must accumulate gradient on the shared row.
    check_unary("gather_rows", rand_mat(4, 3, 29), |t, a| {
        t.gather_rows(a, vec![1, 1, 3, 0, 1])
    });
    check_unary("scatter_add_rows", rand_mat(5, 3, 30), |t, a| {
        t.scatter_add_rows(a, vec![2, 0, 2, 1, 0], 4)
    });
}

#[test]
fn shape_op_grads() {
    check_binary(
        "concat_cols",
        rand_mat(3, 2, 31),
        rand_mat(3, 4, 32),
        |t, a, b| t.concat_cols(a, b),
    );
    check_unary("slice_cols", rand_mat(3, 6, 33), |t, a| {
        t.slice_cols(a, 2, 3)
    });
    check_unary("stack_rows", rand_mat(1, 4, 34), |t, a| {
        let b = t.scale(a, 2.0);
        let c = t.sigmoid(a);
        t.stack_rows(&[a, b, c])
    });
}

#[test]
fn segment_softmax_grads_and_normalization() {
    // Segments of size 3, 1 (singleton) and 2, two columns each.
    let segments = vec![0, 0, 0, 1, 2, 2];
    check_unary("segment_softmax", rand_mat(6, 2, 35), |t, a| {
        t.segment_softmax(a, segments.clone())
    });

    let mut tape = Tape::new();
    let x = tape.constant(rand_mat(6, 2, 36));
    let sm = tape.segment_softmax(x, segments.clone());
    let v = tape.value(sm);
    for seg in 0..3 {
        for c in 0..2 {
            let total: f64 = segments
                .iter()
                .enumerate()
                .filter(|(_, &s)| s == seg)
                .map(|(k, _)| v[(k, c)])
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "segment {seg} col {c}");
        }
    }
    // A singleton segment is exactly 1 regardless of its score.
    assert_eq!(v[(3, 0)], 1.0);
    assert_eq!(v[(3, 1)], 1.0);
}

#[test]
fn head_block_op_grads() {
    // 2 heads of width 3 => feature dim 6.
    check_binary(
        "head_block_dot",
        rand_mat(5, 6, 37),
        rand_mat(2, 3, 38),
        |t, x, a| t.head_block_dot(x, a),
    );
    check_binary(
        "mul_head_blocks",
        rand_mat(5, 6, 39),
        rand_mat(5, 2, 40),
        |t, x, w| t.mul_head_blocks(x, w),
    );
}

#[test]
fn head_block_dot_matches_manual() {
    let mut tape = Tape::new();
    let x = tape.constant(Mat::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let a = tape.constant(Mat::from_shape_vec((2, 2), vec![0.5, -1.0, 2.0, 0.25]).unwrap());
    let d = tape.head_block_dot(x, a);
    let v = tape.value(d);
    assert_eq!(v[(0, 0)], 1.0 * 0.5 + 2.0 * -1.0);
    assert_eq!(v[(0, 1)], 3.0 * 2.0 + 4.0 * 0.25);
}

#[test]
fn gradient_accumulates_across_reuse() {
    // y = x * x + x  =>  dy/dx = 2x + 1.
    let mut params = ParamStore::new();
    params.insert("x", Mat::from_elem((1, 1), 3.0));
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = bound.id("x");
    let sq = tape.mul(x, x);
    let y = tape.add(sq, x);
    let grads = tape.backward(y);
    assert_eq!(grads.wrt(x).unwrap()[(0, 0)], 7.0);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Mat::from_elem((2, 2), 1.0));
    let x = tape.leaf(Mat::from_elem((2, 2), 2.0));
    let y = tape.mul(x, c);
    let s = tape.sum_all(y);
    let grads = tape.backward(s);
    assert!(grads.wrt(c).is_none());
    assert!(grads.wrt(x).is_some());
}

#[test]
fn unreached_leaf_yields_zero_named_grad() {
    let mut params = ParamStore::new();
    params.insert("used", Mat::from_elem((1, 2), 1.0));
    params.insert("unused", Mat::from_elem((2, 2), 1.0));
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let s = tape.sum_all(bound.id("used"));
    let grads = tape.backward(s);
    let named = grads.named(&tape, &bound);
    assert_eq!(named["unused"], Mat::zeros((2, 2)));
    assert_eq!(named["used"], Mat::from_elem((1, 2), 1.0));
}

#[test]
fn clamp_saturates_gradient_outside_range() {
    let mut tape = Tape::new();
    let x = tape.leaf(Mat::from_shape_vec((1, 3), vec![-5.0, 0.0, 5.0]).unwrap());
    let y = tape.clamp(x, -1.0, 1.0);
    let s = tape.sum_all(y);
    let grads = tape.backward(s);
    let g = grads.wrt(x).unwrap();
    assert_eq!(g[(0, 0)], 0.0);
    assert_eq!(g[(0, 1)], 1.0);
    assert_eq!(g[(0, 2)], 0.0);
}

#[test]
fn scatter_then_gather_round_trip_values() {
    let mut tape = Tape::new();
    let x = tape.constant(rand_mat(5, 3, 41));
    let idx = vec![1, 0, 1, 2, 0];
    let pooled = tape.scatter_add_rows(x, idx.clone(), 3);
    let v = tape.value(pooled).clone();
    let xv = tape.value(x);
    for i in 0..3 {
        let mut expect = ndarray::Array1::<f64>::zeros(3);
        for (k, &s) in idx.iter().enumerate() {
            if s == i {
                expect += &xv.row(k);
            }
        }
        for j in 0..3 {
            assert!((v[(i, j)] - expect[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn softplus_is_stable_for_large_inputs() {
    let mut tape = Tape::new();
    let x = tape.constant(Mat::from_shape_vec((1, 2), vec![800.0, -800.0]).unwrap());
    let y = tape.softplus(x);
    let v = tape.value(y);
    assert!((v[(0, 0)] - 800.0).abs() < 1e-9);
    assert!(v[(0, 1)] >= 0.0 && v[(0, 1)] < 1e-12);
}

#[test]
fn row_log_sum_exp_is_stable_and_exact() {
    let mut tape = Tape::new();
    let x = tape.constant(Mat::from_shape_vec((1, 3), vec![1000.0, 1000.0, 1000.0]).unwrap());
    let y = tape.row_log_sum_exp(x);
    assert!((tape.value(y)[(0, 0)] - (1000.0 + 3.0f64.ln())).abs() < 1e-9);
}
