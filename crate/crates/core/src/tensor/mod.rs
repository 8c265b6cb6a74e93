//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every differentiable computation in this crate is expressed as a tape
//! of matrix operations. A forward pass appends nodes to a [`Tape`];
//! [`Tape::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products. All values are 2-D (`N x d`); scalars are
//! `1 x 1` matrices. The tape is single-threaded and deterministic:
//! identical op sequences produce bit-identical values and gradients.

mod check;
mod params;

pub use check::{default_gradient_check, gradient_check, GradCheck};
pub use params::{BoundParams, Gradients, ParamStore};

use ndarray::{Array2, Axis};

/// Dense matrix value carried on the tape.
pub type Mat = Array2<f64>;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tid(pub(crate) usize);

enum Op {
    /// Trainable input; gradients are accumulated for it.
    Leaf,
    /// Non-trainable input; backward skips it.
    Constant,
    Add(Tid, Tid),
    Sub(Tid, Tid),
    Mul(Tid, Tid),
    Neg(Tid),
    Scale(Tid, f64),
    AddRow(Tid, Tid),
    MulRow(Tid, Tid),
    MatMul(Tid, Tid),
    Relu(Tid),
    LeakyRelu(Tid, f64),
    Sigmoid(Tid),
    Tanh(Tid),
    Exp(Tid),
    Softplus(Tid),
    Sqrt(Tid),
    Clamp(Tid, f64, f64),
    SumAll(Tid),
    MeanRows(Tid),
    RowSums(Tid),
    RowLogSumExp(Tid),
    SelectPerRow(Tid, Vec<usize>),
    GatherRows(Tid, Vec<usize>),
    ScatterAddRows(Tid, Vec<usize>),
    SegmentSoftmax(Tid, Vec<usize>),
    ConcatCols(Tid, Tid),
    SliceCols(Tid, usize),
    StackRows(Vec<Tid>),
    HeadBlockDot(Tid, Tid),
    MulHeadBlocks(Tid, Tid),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrow the forward value of a node.
    pub fn value(&self, t: Tid) -> &Mat {
        &self.nodes[t.0].value
    }

    /// Forward value of a `1 x 1` node as a plain scalar.
    pub fn scalar(&self, t: Tid) -> f64 {
        let v = self.value(t);
        assert_eq!(v.dim(), (1, 1), "scalar() on a non-scalar node");
        v[(0, 0)]
    }

    fn push(&mut self, value: Mat, op: Op) -> Tid {
        self.nodes.push(Node { value, op });
        Tid(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Mat) -> Tid {
        self.push(value, Op::Leaf)
    }

    /// Non-trainable input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Mat) -> Tid {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Tid {
        self.constant(Mat::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Tid) -> Tid {
        let v = -self.value(a);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Tid, c: f64) -> Tid {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Broadcast-add a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: Tid, row: Tid) -> Tid {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1 x d row");
        assert_eq!(r.ncols(), self.value(a).ncols());
        let v = self.value(a) + r;
        self.push(v, Op::AddRow(a, row))
    }

    /// Broadcast-multiply every row of `a` by a `1 x d` row.
    pub fn mul_row(&mut self, a: Tid, row: Tid) -> Tid {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "mul_row expects a 1 x d row");
        assert_eq!(r.ncols(), self.value(a).ncols());
        let v = self.value(a) * r;
        self.push(v, Op::MulRow(a, row))
    }

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Tid, slope: f64) -> Tid {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Tid) -> Tid {
        let v = self.value(a).mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Tid) -> Tid {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Tid) -> Tid {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Tid) -> Tid {
        let v = self.value(a).mapv(softplus_scalar);
        self.push(v, Op::Softplus(a))
    }

    /// Element-wise square root; inputs must be strictly positive.
    pub fn sqrt(&mut self, a: Tid) -> Tid {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Clamp to `[lo, hi]`; gradient is passed through strictly inside the range.
    pub fn clamp(&mut self, a: Tid, lo: f64, hi: f64) -> Tid {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries, as `1 x 1`.
    pub fn sum_all(&mut self, a: Tid) -> Tid {
        let s = self.value(a).sum();
        self.push(Mat::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Tid) -> Tid {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: Tid) -> Tid {
        let v = self.value(a);
        let n = v.nrows() as f64;
        let m = v.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        self.push(m, Op::MeanRows(a))
    }

    /// Row sums: `n x d -> n x 1`.
    pub fn row_sums(&mut self, a: Tid) -> Tid {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSums(a))
    }

    /// Stable per-row log-sum-exp: `n x d -> n x 1`.
    pub fn row_log_sum_exp(&mut self, a: Tid) -> Tid {
        let v = self.value(a);
        let mut out = Mat::zeros((v.nrows(), 1));
        for (i, row) in v.outer_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            out[(i, 0)] = m + s.ln();
        }
        self.push(out, Op::RowLogSumExp(a))
    }

    /// Pick one entry per row: `out[i] = a[i, idx[i]]`.
    pub fn select_per_row(&mut self, a: Tid, idx: Vec<usize>) -> Tid {
        let v = self.value(a);
        assert_eq!(idx.len(), v.nrows());
        let mut out = Mat::zeros((v.nrows(), 1));
        for (i, &j) in idx.iter().enumerate() {
            out[(i, 0)] = v[(i, j)];
        }
        self.push(out, Op::SelectPerRow(a, idx))
    }

    /// Row gather: `out[k] = a[idx[k]]`. Duplicate indices are allowed.
    pub fn gather_rows(&mut self, a: Tid, idx: Vec<usize>) -> Tid {
        let v = self.value(a);
        let mut out = Mat::zeros((idx.len(), v.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).assign(&v.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Segment sum of rows: `out[i] = sum over k with idx[k] == i of a[k]`.
    pub fn scatter_add_rows(&mut self, a: Tid, idx: Vec<usize>, n_rows: usize) -> Tid {
        let v = self.value(a);
        assert_eq!(idx.len(), v.nrows());
        let mut out = Mat::zeros((n_rows, v.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            let mut r = out.row_mut(i);
            r += &v.row(k);
        }
        self.push(out, Op::ScatterAddRows(a, idx))
    }

    /// Softmax over rows sharing a segment id, independently per column.
    ///
    /// `a` is `m x h`, `segments[k]` assigns row `k` to a group; within each
    /// group every column is normalized to sum to 1.
    pub fn segment_softmax(&mut self, a: Tid, segments: Vec<usize>) -> Tid {
        let v = self.value(a);
        assert_eq!(segments.len(), v.nrows());
        let out = segment_softmax_forward(v, &segments);
        self.push(out, Op::SegmentSoftmax(a, segments))
    }

    pub fn concat_cols(&mut self, a: Tid, b: Tid) -> Tid {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows());
        let mut out = Mat::zeros((va.nrows(), va.ncols() + vb.ncols()));
        out.slice_mut(ndarray::s![.., ..va.ncols()]).assign(va);
        out.slice_mut(ndarray::s![.., va.ncols()..]).assign(vb);
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Columns `[start, start + len)` of `a`.
    pub fn slice_cols(&mut self, a: Tid, start: usize, len: usize) -> Tid {
        let v = self.value(a);
        assert!(start + len <= v.ncols());
        let out = v.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    /// Stack `1 x d` rows into an `n x d` matrix.
    pub fn stack_rows(&mut self, rows: &[Tid]) -> Tid {
        assert!(!rows.is_empty());
        let d = self.value(rows[0]).ncols();
        let mut out = Mat::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            let v = self.value(r);
            assert_eq!(v.dim(), (1, d), "stack_rows expects 1 x d inputs");
            out.row_mut(i).assign(&v.row(0));
        }
        self.push(out, Op::StackRows(rows.to_vec()))
    }

    /// Per-head block dot products.
    ///
    /// `x` is `m x (h * hd)`, `a` is `h x hd`; `out[e, k] = x[e, block k] . a[k]`.
    pub fn head_block_dot(&mut self, x: Tid, a: Tid) -> Tid {
        let (vx, va) = (self.value(x), self.value(a));
        let (heads, hd) = va.dim();
        assert_eq!(vx.ncols(), heads * hd, "head_block_dot dimension mismatch");
        let mut out = Mat::zeros((vx.nrows(), heads));
        for e in 0..vx.nrows() {
            for k in 0..heads {
                let mut s = 0.0;
                for j in 0..hd {
                    s += vx[(e, k * hd + j)] * va[(k, j)];
                }
                out[(e, k)] = s;
            }
        }
        self.push(out, Op::HeadBlockDot(x, a))
    }

    /// Scale each per-head column block of `x` by the matching weight column.
    ///
    /// `x` is `m x (h * hd)`, `w` is `m x h`; `out[e, block k] = x[e, block k] * w[e, k]`.
    pub fn mul_head_blocks(&mut self, x: Tid, w: Tid) -> Tid {
        let (vx, vw) = (self.value(x), self.value(w));
        let heads = vw.ncols();
        assert_eq!(vx.nrows(), vw.nrows());
        assert_eq!(vx.ncols() % heads, 0, "mul_head_blocks dimension mismatch");
        let hd = vx.ncols() / heads;
        let mut out = vx.clone();
        for e in 0..vx.nrows() {
            for k in 0..heads {
                for j in 0..hd {
                    out[(e, k * hd + j)] *= vw[(e, k)];
                }
            }
        }
        self.push(out, Op::MulHeadBlocks(x, w))
    }

    /// Reverse pass from a `1 x 1` output node.
    pub fn backward(&self, output: Tid) -> Gradients {
        assert_eq!(
            self.value(output).dim(),
            (1, 1),
            "backward() expects a scalar output"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            // Leaves keep their gradient; interior nodes can drop theirs.
            match self.nodes[i].op {
                Op::Leaf => grads[i] = Some(g),
                _ => {}
            }
        }
        Gradients::new(grads)
    }

    fn accum(&self, grads: &mut [Option<Mat>], t: Tid, delta: Mat) {
        if matches!(self.nodes[t.0].op, Op::Constant) {
            return;
        }
        match &mut grads[t.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                let da = g * self.value(*b);
                let db = g * self.value(*a);
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Neg(a) => self.accum(grads, *a, -g),
            Op::Scale(a, c) => self.accum(grads, *a, g * *c),
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone());
                let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accum(grads, *row, dr);
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                self.accum(grads, *a, g * r);
                let dr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accum(grads, *row, dr);
            }
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Relu(a) => {
                let mask = out.mapv(|y| if y > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *a, g * &mask);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let mask = out.mapv(|y| if y > 0.0 { 1.0 } else { s });
                self.accum(grads, *a, g * &mask);
            }
            Op::Sigmoid(a) => {
                let d = out.mapv(|y| y * (1.0 - y));
                self.accum(grads, *a, g * &d);
            }
            Op::Tanh(a) => {
                let d = out.mapv(|y| 1.0 - y * y);
                self.accum(grads, *a, g * &d);
            }
            Op::Exp(a) => self.accum(grads, *a, g * out),
            Op::Softplus(a) => {
                // d/dx softplus(x) = sigmoid(x) = 1 - e^{-softplus(x)}
                let d = out.mapv(|y| 1.0 - (-y).exp());
                self.accum(grads, *a, g * &d);
            }
            Op::Sqrt(a) => {
                let d = out.mapv(|y| 0.5 / y);
                self.accum(grads, *a, g * &d);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let mask = out.mapv(|y| if y > lo && y < hi { 1.0 } else { 0.0 });
                self.accum(grads, *a, g * &mask);
            }
            Op::SumAll(a) => {
                let s = g[(0, 0)];
                let v = self.value(*a);
                self.accum(grads, *a, Mat::from_elem(v.dim(), s));
            }
            Op::MeanRows(a) => {
                let v = self.value(*a);
                let n = v.nrows() as f64;
                let mut da = Mat::zeros(v.dim());
                for mut r in da.outer_iter_mut() {
                    r.assign(&(g.row(0).to_owned() / n));
                }
                self.accum(grads, *a, da);
            }
            Op::RowSums(a) => {
                let v = self.value(*a);
                let mut da = Mat::zeros(v.dim());
                for (i, mut r) in da.outer_iter_mut().enumerate() {
                    r.fill(g[(i, 0)]);
                }
                self.accum(grads, *a, da);
            }
            Op::RowLogSumExp(a) => {
                let v = self.value(*a);
                let mut da = Mat::zeros(v.dim());
                for (i, row) in v.outer_iter().enumerate() {
                    let lse = out[(i, 0)];
                    for (j, &x) in row.iter().enumerate() {
                        da[(i, j)] = g[(i, 0)] * (x - lse).exp();
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::SelectPerRow(a, idx) => {
                let v = self.value(*a);
                let mut da = Mat::zeros(v.dim());
                for (i, &j) in idx.iter().enumerate() {
                    da[(i, j)] = g[(i, 0)];
                }
                self.accum(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let v = self.value(*a);
                let mut da = Mat::zeros(v.dim());
                for (k, &i) in idx.iter().enumerate() {
                    let mut r = da.row_mut(i);
                    r += &g.row(k);
                }
                self.accum(grads, *a, da);
            }
            Op::ScatterAddRows(a, idx) => {
                let v = self.value(*a);
                let mut da = Mat::zeros(v.dim());
                for (k, &i) in idx.iter().enumerate() {
                    da.row_mut(k).assign(&g.row(i));
                }
                self.accum(grads, *a, da);
            }
            Op::SegmentSoftmax(a, segments) => {
                let da = segment_softmax_backward(out, g, segments);
                self.accum(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                let da = g.slice(ndarray::s![.., ..ca]).to_owned();
                let db = g.slice(ndarray::s![.., ca..]).to_owned();
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::SliceCols(a, start) => {
                let v = self.value(*a);
                let mut da = Mat::zeros(v.dim());
                da.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                    .assign(g);
                self.accum(grads, *a, da);
            }
            Op::StackRows(rows) => {
                for (i, &r) in rows.iter().enumerate() {
                    let dr = g.row(i).to_owned().insert_axis(Axis(0));
                    self.accum(grads, r, dr);
                }
            }
            Op::HeadBlockDot(x, a) => {
                let (vx, va) = (self.value(*x), self.value(*a));
                let (heads, hd) = va.dim();
                let mut dx = Mat::zeros(vx.dim());
                let mut da = Mat::zeros(va.dim());
                for e in 0..vx.nrows() {
                    for k in 0..heads {
                        let ge = g[(e, k)];
                        for j in 0..hd {
                            dx[(e, k * hd + j)] += ge * va[(k, j)];
                            da[(k, j)] += ge * vx[(e, k * hd + j)];
                        }
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *a, da);
            }
            Op::MulHeadBlocks(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let heads = vw.ncols();
                let hd = vx.ncols() / heads;
                let mut dx = Mat::zeros(vx.dim());
                let mut dw = Mat::zeros(vw.dim());
                for e in 0..vx.nrows() {
                    for k in 0..heads {
                        let we = vw[(e, k)];
                        let mut s = 0.0;
                        for j in 0..hd {
                            let c = k * hd + j;
                            dx[(e, c)] += g[(e, c)] * we;
                            s += g[(e, c)] * vx[(e, c)];
                        }
                        dw[(e, k)] = s;
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *w, dw);
            }
        }
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn segment_softmax_forward(v: &Mat, segments: &[usize]) -> Mat {
    let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
    let h = v.ncols();
    let mut maxes = vec![f64::NEG_INFINITY; n_seg * h];
    for (k, &s) in segments.iter().enumerate() {
        for c in 0..h {
            let m = &mut maxes[s * h + c];
            *m = m.max(v[(k, c)]);
        }
    }
    let mut sums = vec![0.0; n_seg * h];
    let mut out = Mat::zeros(v.dim());
    for (k, &s) in segments.iter().enumerate() {
        for c in 0..h {
            let e = (v[(k, c)] - maxes[s * h + c]).exp();
            out[(k, c)] = e;
            sums[s * h + c] += e;
        }
    }
    for (k, &s) in segments.iter().enumerate() {
        for c in 0..h {
            out[(k, c)] /= sums[s * h + c];
        }
    }
    out
}

fn segment_softmax_backward(out: &Mat, g: &Mat, segments: &[usize]) -> Mat {
    let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
    let h = out.ncols();
    // dot[s, c] = sum over rows k in segment s of g[k, c] * a[k, c]
    let mut dot = vec![0.0; n_seg * h];
    for (k, &s) in segments.iter().enumerate() {
        for c in 0..h {
            dot[s * h + c] += g[(k, c)] * out[(k, c)];
        }
    }
    let mut da = Mat::zeros(out.dim());
    for (k, &s) in segments.iter().enumerate() {
        for c in 0..h {
            da[(k, c)] = out[(k, c)] * (g[(k, c)] - dot[s * h + c]);
        }
    }
    da
}

#[cfg(test)]
mod tests;
