//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.
//! Graphs are cheap, single-use and independent of each other, so per-utterance
//! graphs can be built in any order and their parameter gradients summed.

use std::collections::HashMap;

use crate::decoders::ctc;
use crate::dynamic_merge::{self, AllocEntry};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Snake(Var, Var),
    Abs(Var),
    LogSoftmax(Var),
    Softmax(Var),
    LayerNorm(Var),
    Unfold { x: Var, kernel: usize, stride: usize, pad: usize },
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    ColSum(Var),
    CumsumCol(Var),
    ScaleToSum { alpha: Var, target: f64, fallback: bool },
    IntegrateFire { h: Var, s: Var, theta: f64, alloc: Vec<AllocEntry> },
    WeightedRows { x: Var, entries: Vec<AllocEntry> },
    StRound(Var),
    Ctc { log_probs: Var, target: Vec<usize>, blank: usize },
    NllPick { log_probs: Var, picks: Vec<(usize, usize)> },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new() }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for input-sensitivity checks).
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// The graph node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph built without a parameter store");
        let p = store.param(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!((1, xv.cols()), rv.shape(), "add_row shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(&[x, row]);
        self.push(out, Op::AddRow(x, row), ng)
    }

    /// Multiplies every row of `x` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!((1, xv.cols()), rv.shape(), "mul_row shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        let ng = self.ng(&[x, row]);
        self.push(out, Op::MulRow(x, row), ng)
    }

    /// Adds an `R x 1` column to every column of `x`.
    pub fn add_col(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert_eq!((xv.rows(), 1), cv.shape(), "add_col shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let c = cv.get(r, 0);
            for o in out.row_mut(r) {
                *o += c;
            }
        }
        let ng = self.ng(&[x, col]);
        self.push(out, Op::AddCol(x, col), ng)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|a| a * k);
        let ng = self.ng(&[x]);
        self.push(v, Op::Scale(x, k), ng)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|a| a + k);
        let ng = self.ng(&[x]);
        self.push(v, Op::Offset(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let ng = self.ng(&[x]);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let ng = self.ng(&[x]);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(&[x]);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let ng = self.ng(&[x]);
        self.push(v, Op::Silu(x), ng)
    }

    /// Snake activation `x + sin^2(a x) / a` with one `a` per channel (`1 x C`).
    pub fn snake(&mut self, x: Var, alpha: Var) -> Var {
        let (xv, av) = (self.value(x), self.value(alpha));
        assert_eq!((1, xv.cols()), av.shape(), "snake alpha shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &a) in out.row_mut(r).iter_mut().zip(av.data()) {
                let s = (a * *o).sin();
                *o += s * s / a;
            }
        }
        let ng = self.ng(&[x, alpha]);
        self.push(out, Op::Snake(x, alpha), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let ng = self.ng(&[x]);
        self.push(v, Op::Abs(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for o in row {
                *o -= lse;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for o in row.iter_mut() {
                *o = (*o - max).exp();
                z += *o;
            }
            for o in row.iter_mut() {
                *o /= z;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let (mean, inv_std) = row_stats(row);
            for o in row {
                *o = (*o - mean) * inv_std;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::LayerNorm(x), ng)
    }

    /// Sliding windows for 1-D convolution. Row `t` of the result holds input
    /// rows `t*stride - pad .. t*stride - pad + kernel` concatenated, with zeros
    /// outside the sequence.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (t_in, c) = xv.shape();
        let t_out = conv_out_len(t_in, kernel, stride, pad);
        let mut out = Mat::zeros(t_out, kernel * c);
        for t in 0..t_out {
            for k in 0..kernel {
                let src = (t * stride + k) as isize - pad as isize;
                if src >= 0 && (src as usize) < t_in {
                    out.row_mut(t)[k * c..(k + 1) * c].copy_from_slice(xv.row(src as usize));
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Unfold { x, kernel, stride, pad }, ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshaped(rows, cols);
        let ng = self.ng(&[x]);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let v = self.value(x).select_rows(&idx);
        let ng = self.ng(&[x]);
        self.push(v, Op::GatherRows(x, idx), ng)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows();
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Mat::zeros(rows, total);
        let mut off = 0;
        for &v in xs {
            let m = self.value(v);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let ng = self.ng(xs);
        self.push(out, Op::ConcatCols(xs.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let cols = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let m = self.value(v);
            assert_eq!(m.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let ng = self.ng(xs);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(xs.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        let ng = self.ng(&[x]);
        self.push(v, Op::Transpose(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Mat::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(v, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Mat::scalar(self.value(x).mean());
        let ng = self.ng(&[x]);
        self.push(v, Op::MeanAll(x), ng)
    }

    /// Sum over rows, giving `1 x C`.
    pub fn col_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, a) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += a;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::ColSum(x), ng)
    }

    /// Running sum down a `T x 1` column.
    pub fn cumsum_col(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1, "cumsum_col expects a column");
        let mut acc = 0.0;
        let data = xv
            .data()
            .iter()
            .map(|a| {
                acc += a;
                acc
            })
            .collect();
        let ng = self.ng(&[x]);
        self.push(Mat::col_vector(data), Op::CumsumCol(x), ng)
    }

    /// Rescales a nonnegative column so it sums to `target`; see
    /// [`dynamic_merge::scale_weights`] for the zero-sum fallback.
    pub fn scale_to_sum(&mut self, alpha: Var, target: f64) -> Var {
        let a = self.value(alpha).data().to_vec();
        let fallback = a.iter().sum::<f64>() < dynamic_merge::ZERO_SUM_EPS;
        let scaled = dynamic_merge::scale_to_target(&a, target);
        let ng = self.ng(&[alpha]);
        self.push(Mat::col_vector(scaled), Op::ScaleToSum { alpha, target, fallback }, ng)
    }

    /// Soft integrate-and-fire: `C = W^T H` where `W[t, j]` is the overlap of
    /// frame `t`'s cumulative-weight interval with token `j`'s interval.
    pub fn integrate_fire(&mut self, h: Var, prefix: Var, theta: f64, n: usize) -> Var {
        let s = self.value(prefix).data().to_vec();
        let hv = self.value(h);
        assert_eq!(hv.rows(), s.len(), "integrate_fire length mismatch");
        let alloc = dynamic_merge::allocation_from_prefix(&s, theta, n);
        let c = apply_alloc(hv, &alloc, n);
        let ng = self.ng(&[h, prefix]);
        self.push(c, Op::IntegrateFire { h, s: prefix, theta, alloc }, ng)
    }

    /// `C[dst] += w * X[src]` for constant weights.
    pub fn weighted_rows(&mut self, x: Var, entries: Vec<AllocEntry>, n_out: usize) -> Var {
        let c = apply_alloc(self.value(x), &entries, n_out);
        let ng = self.ng(&[x]);
        self.push(c, Op::WeightedRows { x, entries }, ng)
    }

    /// Round half up in the forward pass, identity in the backward pass.
    pub fn st_round(&mut self, x: Var) -> Var {
        let v = self.value(x).map(round_half_up);
        let ng = self.ng(&[x]);
        self.push(v, Op::StRound(x), ng)
    }

    /// Negative log-likelihood of `target` under CTC; `log_probs` are per-frame
    /// log-probabilities including the blank.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
        let loss = ctc::ctc_loss(self.value(log_probs), target, blank)?;
        let ng = self.ng(&[log_probs]);
        Ok(self.push(Mat::scalar(loss), Op::Ctc { log_probs, target: target.to_vec(), blank }, ng))
    }

    /// `-sum log_probs[r, c]` over the given `(row, col)` picks.
    pub fn nll_pick(&mut self, log_probs: Var, picks: Vec<(usize, usize)>) -> Var {
        let lp = self.value(log_probs);
        let v = -picks.iter().map(|&(r, c)| lp.get(r, c)).sum::<f64>();
        let ng = self.ng(&[log_probs]);
        self.push(Mat::scalar(v), Op::NllPick { log_probs, picks }, ng)
    }

    /// Mean squared error between two equal-shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                Some(a) => self.add(a, s),
                None => s,
            });
        }
        acc.unwrap_or_else(|| self.constant(Mat::scalar(0.0)))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    /// Parameter gradients aligned with the store's ids (`None` for unused or frozen).
    pub fn param_grads(&self, grads: &Grads) -> Vec<Option<Mat>> {
        let store = self.store.expect("graph built without a parameter store");
        let mut out = vec![None; store.len()];
        for (&id, &v) in &self.param_vars {
            if self.nodes[v.0].needs_grad {
                out[id.0] = grads.grads[v.0].clone();
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                self.acc(grads, *a, || g.matmul_nt(val(*b)));
                self.acc(grads, *b, || val(*a).matmul_tn(g));
            }
            Op::MatMulNt(a, b) => {
                self.acc(grads, *a, || g.matmul(val(*b)));
                self.acc(grads, *b, || g.matmul_tn(val(*a)));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, || g.zip_map(val(*b), |x, y| x * y));
                self.acc(grads, *b, || g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, || g.clone());
                self.acc(grads, *row, || col_sums(g));
            }
            Op::MulRow(x, row) => {
                let rv = val(*row);
                self.acc(grads, *x, || {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        for (o, s) in d.row_mut(r).iter_mut().zip(rv.data()) {
                            *o *= s;
                        }
                    }
                    d
                });
                self.acc(grads, *row, || col_sums(&g.zip_map(val(*x), |a, b| a * b)));
            }
            Op::AddCol(x, col) => {
                self.acc(grads, *x, || g.clone());
                self.acc(grads, *col, || {
                    Mat::col_vector((0..g.rows()).map(|r| g.row(r).iter().sum()).collect())
                });
            }
            Op::Scale(x, k) => self.acc(grads, *x, || g.map(|a| a * k)),
            Op::Offset(x) => self.acc(grads, *x, || g.clone()),
            Op::Tanh(x) => self.acc(grads, *x, || g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
            Op::Sigmoid(x) => self.acc(grads, *x, || g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            Op::Relu(x) => self.acc(grads, *x, || g.zip_map(val(*x), |d, a| if a > 0.0 { d } else { 0.0 })),
            Op::Silu(x) => self.acc(grads, *x, || {
                g.zip_map(val(*x), |d, a| {
                    let s = sigmoid(a);
                    d * (s + a * s * (1.0 - s))
                })
            }),
            Op::Snake(x, alpha) => {
                let (xv, av) = (val(*x), val(*alpha));
                self.acc(grads, *x, || {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        for ((o, &a), &xi) in d.row_mut(r).iter_mut().zip(av.data()).zip(xv.row(r)) {
                            *o *= 1.0 + (2.0 * a * xi).sin();
                        }
                    }
                    d
                });
                self.acc(grads, *alpha, || {
                    let mut out = Mat::zeros(1, av.cols());
                    for r in 0..xv.rows() {
                        for (c, (&xi, &d)) in xv.row(r).iter().zip(g.row(r)).enumerate() {
                            let a = av.data()[c];
                            let s = (a * xi).sin();
                            out.data_mut()[c] += d * (xi * (2.0 * a * xi).sin() / a - s * s / (a * a));
                        }
                    }
                    out
                });
            }
            Op::Abs(x) => self.acc(grads, *x, || g.zip_map(val(*x), |d, a| d * sign(a))),
            Op::LogSoftmax(x) => self.acc(grads, *x, || {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (o, &y) in d.row_mut(r).iter_mut().zip(node.value.row(r)) {
                        *o -= y.exp() * gsum;
                    }
                }
                d
            }),
            Op::Softmax(x) => self.acc(grads, *x, || {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let y = node.value.row(r);
                    let dot: f64 = g.row(r).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (o, &yi) in d.row_mut(r).iter_mut().zip(y) {
                        *o = yi * (*o - dot);
                    }
                }
                d
            }),
            Op::LayerNorm(x) => self.acc(grads, *x, || {
                let xv = val(*x);
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let (_, inv_std) = row_stats(xv.row(r));
                    let y = node.value.row(r);
                    let n = y.len() as f64;
                    let gm: f64 = g.row(r).iter().sum::<f64>() / n;
                    let gy: f64 = g.row(r).iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (o, &yi) in d.row_mut(r).iter_mut().zip(y) {
                        *o = inv_std * (*o - gm - yi * gy);
                    }
                }
                d
            }),
            Op::Unfold { x, kernel, stride, pad } => self.acc(grads, *x, || {
                let (t_in, c) = val(*x).shape();
                let mut d = Mat::zeros(t_in, c);
                for t in 0..g.rows() {
                    for k in 0..*kernel {
                        let src = (t * stride + k) as isize - *pad as isize;
                        if src >= 0 && (src as usize) < t_in {
                            let gr = &g.row(t)[k * c..(k + 1) * c];
                            for (o, a) in d.row_mut(src as usize).iter_mut().zip(gr) {
                                *o += a;
                            }
                        }
                    }
                }
                d
            }),
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                self.acc(grads, *x, || g.clone().reshaped(r, c));
            }
            Op::GatherRows(x, idx) => self.acc(grads, *x, || {
                let xv = val(*x);
                let mut d = Mat::zeros(xv.rows(), xv.cols());
                for (k, &src) in idx.iter().enumerate() {
                    for (o, a) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += a;
                    }
                }
                d
            }),
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &v in xs {
                    let cols = val(v).cols();
                    self.acc(grads, v, || {
                        let mut d = Mat::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        d
                    });
                    off += cols;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let rows = val(v).rows();
                    self.acc(grads, v, || g.slice_rows(off, rows));
                    off += rows;
                }
            }
            Op::SliceCols { x, start } => self.acc(grads, *x, || {
                let xv = val(*x);
                let mut d = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                d
            }),
            Op::Transpose(x) => self.acc(grads, *x, || g.transpose()),
            Op::SumAll(x) => {
                let (r, c) = val(*x).shape();
                self.acc(grads, *x, || Mat::filled(r, c, g.item()));
            }
            Op::MeanAll(x) => {
                let (r, c) = val(*x).shape();
                let n = (r * c) as f64;
                self.acc(grads, *x, || Mat::filled(r, c, g.item() / n));
            }
            Op::ColSum(x) => self.acc(grads, *x, || {
                let (r, c) = val(*x).shape();
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).copy_from_slice(g.data());
                }
                d
            }),
            Op::CumsumCol(x) => self.acc(grads, *x, || {
                let mut acc = 0.0;
                let mut d: Vec<f64> = g
                    .data()
                    .iter()
                    .rev()
                    .map(|a| {
                        acc += a;
                        acc
                    })
                    .collect();
                d.reverse();
                Mat::col_vector(d)
            }),
            Op::ScaleToSum { alpha, target, fallback } => {
                if !*fallback {
                    self.acc(grads, *alpha, || {
                        let a = val(*alpha).data();
                        let total: f64 = a.iter().sum();
                        let ga: f64 = g.data().iter().zip(a).map(|(x, y)| x * y).sum::<f64>() / total;
                        let k = target / total;
                        Mat::col_vector(g.data().iter().map(|gi| k * (gi - ga)).collect())
                    });
                }
            }
            Op::IntegrateFire { h, s, theta, alloc } => {
                let hv = val(*h);
                self.acc(grads, *h, || {
                    let mut d = Mat::zeros(hv.rows(), hv.cols());
                    for e in alloc {
                        for (o, a) in d.row_mut(e.frame).iter_mut().zip(g.row(e.token)) {
                            *o += e.weight * a;
                        }
                    }
                    d
                });
                self.acc(grads, *s, || {
                    let sv = val(*s).data();
                    let mut d = vec![0.0; sv.len()];
                    for e in alloc {
                        if e.weight <= 0.0 {
                            continue;
                        }
                        let lo = e.token as f64 * theta;
                        let hi = lo + theta;
                        let dot: f64 = g.row(e.token).iter().zip(hv.row(e.frame)).map(|(a, b)| a * b).sum();
                        if sv[e.frame] < hi {
                            d[e.frame] += dot;
                        }
                        if e.frame > 0 && sv[e.frame - 1] > lo {
                            d[e.frame - 1] -= dot;
                        }
                    }
                    Mat::col_vector(d)
                });
            }
            Op::WeightedRows { x, entries } => self.acc(grads, *x, || {
                let xv = val(*x);
                let mut d = Mat::zeros(xv.rows(), xv.cols());
                for e in entries {
                    for (o, a) in d.row_mut(e.frame).iter_mut().zip(g.row(e.token)) {
                        *o += e.weight * a;
                    }
                }
                d
            }),
            Op::StRound(x) => self.acc(grads, *x, || g.clone()),
            Op::Ctc { log_probs, target, blank } => self.acc(grads, *log_probs, || {
                let mut d = ctc::ctc_loss_grad(val(*log_probs), target, *blank).expect("feasibility checked in forward");
                d.scale_assign(g.item());
                d
            }),
            Op::NllPick { log_probs, picks } => self.acc(grads, *log_probs, || {
                let lp = val(*log_probs);
                let mut d = Mat::zeros(lp.rows(), lp.cols());
                for &(r, c) in picks {
                    d.set(r, c, d.get(r, c) - g.item());
                }
                d
            }),
        }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, f: impl FnOnce() -> Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let d = f();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        }
    }
}

fn apply_alloc(x: &Mat, entries: &[AllocEntry], n_out: usize) -> Mat {
    let mut c = Mat::zeros(n_out, x.cols());
    for e in entries {
        let w = e.weight;
        let src = x.row(e.frame);
        for (o, a) in c.row_mut(e.token).iter_mut().zip(src) {
            *o += w * a;
        }
    }
    c
}

fn col_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, a) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += a;
        }
    }
    out
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + 1e-5).sqrt())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(t_in: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = t_in + 2 * pad;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

/// Central finite-difference check helpers shared by unit and integration tests.
pub mod gradcheck {
    use super::*;

    /// Maximum relative error between the analytic gradient of `f` at `x0`
    /// and central differences with step `eps`. Relative error uses
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn max_rel_error(x0: &Mat, eps: f64, floor: f64, f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
        let empty = ParamStore::new();
        max_rel_error_with(&empty, x0, eps, floor, f)
    }

    /// [`max_rel_error`] on graphs bound to `store`, for input sensitivity of parameterised models.
    pub fn max_rel_error_with(
        store: &ParamStore,
        x0: &Mat,
        eps: f64,
        floor: f64,
        f: impl Fn(&mut Graph, Var) -> Var,
    ) -> f64 {
        let mut g = Graph::with_params(store);
        let x = g.input(x0.clone());
        let y = f(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Mat::zeros(x0.rows(), x0.cols()));
        let eval = |m: Mat| {
            let mut g = Graph::with_params(store);
            let x = g.input(m);
            let y = f(&mut g, x);
            g.scalar(y)
        };
        let mut worst: f64 = 0.0;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        worst
    }

    /// Same as [`max_rel_error`] but perturbs stored parameters. `f` builds
    /// the scalar loss on a graph bound to the (possibly perturbed) store.
    pub fn param_max_rel_error(
        store: &ParamStore,
        ids: &[ParamId],
        eps: f64,
        floor: f64,
        f: impl Fn(&mut Graph) -> Var,
    ) -> f64 {
        let mut g = Graph::with_params(store);
        let y = f(&mut g);
        let grads = g.backward(y);
        let pg = g.param_grads(&grads);
        let mut work = store.clone();
        let mut worst: f64 = 0.0;
        for &id in ids {
            let shape = store.get(id).shape();
            let analytic = pg[id.0].clone().unwrap_or_else(|| Mat::zeros(shape.0, shape.1));
            for i in 0..store.get(id).len() {
                let orig = store.get(id).data()[i];
                work.get_mut(id).data_mut()[i] = orig + eps;
                let plus = {
                    let mut g = Graph::with_params(&work);
                    let y = f(&mut g);
                    g.scalar(y)
                };
                work.get_mut(id).data_mut()[i] = orig - eps;
                let minus = {
                    let mut g = Graph::with_params(&work);
                    let y = f(&mut g);
                    g.scalar(y)
                };
                work.get_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic.data()[i];
                let denom = a.abs().max(numeric.abs()).max(floor);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_error;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::params::init_uniform(r, c, 1.0, &mut rng)
    }

    #[test]
    fn elementwise_and_matrix_ops_match_finite_differences() {
        let x0 = rand_mat(4, 3, 1);
        let w = rand_mat(3, 5, 2);
        let row = rand_mat(1, 5, 3);
        let err = max_rel_error(&x0, 1e-6, 1e-8, |g, x| {
            let w = g.constant(w.clone());
            let row = g.constant(row.clone());
            let a = g.matmul(x, w);
            let a = g.add_row(a, row);
            let b = g.tanh(a);
            let c = g.silu(b);
            let d = g.sigmoid(c);
            let e = g.matmul_nt(d, d);
            let f = g.log_softmax(e);
            let h = g.layer_norm(f);
            let k = g.softmax(h);
            let m = g.mul(k, e);
            g.sum_all(m)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x0 = rand_mat(7, 3, 4);
        let err = max_rel_error(&x0, 1e-6, 1e-8, |g, x| {
            let u = g.unfold(x, 3, 2, 1);
            let t = g.transpose(u);
            let t = g.transpose(t);
            let r = g.reshape(t, 9, 4);
            let gr = g.gather_rows(r, vec![0, 3, 3, 8]);
            let sl = g.slice_cols(gr, 1, 2);
            let cc = g.concat_cols(&[sl, sl]);
            let cr = g.concat_rows(&[cc, cc]);
            let cs = g.col_sum(cr);
            let sq = g.mul(cs, cs);
            let alpha = g.constant(Mat::row_vector(vec![0.7, 1.3, 0.9, 1.1]));
            let sn = g.snake(sq, alpha);
            g.mean_all(sn)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn snake_alpha_gradient() {
        let x = rand_mat(5, 3, 9);
        let a0 = Mat::row_vector(vec![0.8, 1.0, 1.7]);
        let err = max_rel_error(&a0, 1e-6, 1e-8, |g, a| {
            let xv = g.constant(x.clone());
            let s = g.snake(xv, a);
            let s2 = g.mul(s, s);
            g.sum_all(s2)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn st_round_passes_gradient_through() {
        let mut g = Graph::new();
        let x = g.input(Mat::row_vector(vec![0.2, 1.5, 2.49]));
        let r = g.st_round(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 2.0]);
        let w = g.constant(Mat::row_vector(vec![1.0, -2.0, 3.0]));
        let y = g.mul(r, w);
        let y = g.sum_all(y);
        let grads = g.backward(y);
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn conv_lengths() {
        assert_eq!(conv_out_len(100, 3, 2, 1), 50);
        assert_eq!(conv_out_len(101, 3, 2, 1), 51);
        assert_eq!(conv_out_len(1, 3, 2, 1), 1);
        assert_eq!(conv_out_len(10, 3, 1, 1), 10);
    }
}
