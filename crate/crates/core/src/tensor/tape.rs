use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Atan2(Var, Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>, usize),
    ScaleRows(Var, Var),
    BatchedMatVec(Var, Var, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; that order is a topological order,
/// so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, usize)>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(x.rows(), x.cols(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        a.rows(),
        a.cols(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input tied to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        let v = self.leaf(value.clone());
        self.params.push((v, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.cols(),
            vb.rows(),
            "matmul: {:?} x {:?}",
            va.shape(),
            vb.shape()
        );
        let out = va.matmul(vb);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `x + bias` with a `1 x n` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        assert!(
            vb.rows() == 1 && vb.cols() == vx.cols(),
            "add_row: {:?} + {:?}",
            vx.shape(),
            vb.shape()
        );
        let mut out = vx.clone();
        let cols = vx.cols();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(cols, out.cols());
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = map(self.value(x), |v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = map(self.value(x), |v| v + s);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = map(self.value(x), f64::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = map(self.value(x), |v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[x]);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = map(self.value(x), softplus);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softplus(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = map(self.value(x), sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = map(self.value(x), f64::exp);
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = map(self.value(x), f64::ln);
        let rg = self.rg(&[x]);
        self.push(out, Op::Log(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| v * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = map(self.value(x), f64::abs);
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        same_shape(self.value(y), self.value(x), "atan2");
        let out = zip(self.value(y), self.value(x), f64::atan2);
        let rg = self.rg(&[y, x]);
        self.push(out, Op::Atan2(y, x), rg)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "min");
        let out = zip(self.value(a), self.value(b), f64::min);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Min(a, b), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = map(self.value(x), |v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.len().max(1) as f64;
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / n);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat_cols: row counts differ");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out.row_mut(r)[off..off + w].copy_from_slice(self.value(p).row(r));
                off += w;
            }
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x);
        assert!(start <= end && end <= v.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(v.rows(), end - start);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols(x, start), rg)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x);
        assert!(start <= end && end <= v.rows(), "slice_rows out of range");
        let c = v.cols();
        let out = Tensor::from_vec(end - start, c, v.data()[start * c..end * c].to_vec());
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceRows(x, start), rg)
    }

    /// Row `k` of the result is row `idx[k]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < v.rows(), "gather_rows: index {i} >= {}", v.rows());
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::from_vec(idx.len(), c, data);
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows(x, idx.to_vec()), rg)
    }

    /// Row `s` of the result is the sum of rows `k` of `x` with `seg[k] == s`.
    pub fn segment_sum(&mut self, x: Var, seg: &[usize], n_segments: usize) -> Var {
        let v = self.value(x);
        assert_eq!(seg.len(), v.rows(), "segment_sum: one segment id per row");
        let c = v.cols();
        let mut out = Tensor::zeros(n_segments, c);
        for (r, &s) in seg.iter().enumerate() {
            assert!(s < n_segments, "segment id {s} >= {n_segments}");
            for (o, x) in out.row_mut(s).iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SegmentSum(x, seg.to_vec()), rg)
    }

    /// Softmax of a column of logits, normalized independently within each
    /// segment (max-subtracted for stability). Every segment must be nonempty.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize], n_segments: usize) -> Result<Var> {
        let v = self.value(x);
        if v.cols() != 1 || seg.len() != v.rows() {
            return Err(Error::Shape(format!(
                "segment_softmax expects an n x 1 column with n segment ids, got {:?} and {}",
                v.shape(),
                seg.len()
            )));
        }
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (k, &s) in seg.iter().enumerate() {
            if s >= n_segments {
                return Err(Error::Shape(format!("segment id {s} >= {n_segments}")));
            }
            max[s] = max[s].max(v.data()[k]);
        }
        if let Some(empty) = max.iter().position(|m| *m == f64::NEG_INFINITY) {
            return Err(Error::InvalidArgument(format!("segment {empty} is empty")));
        }
        let mut out: Vec<f64> = seg
            .iter()
            .enumerate()
            .map(|(k, &s)| (v.data()[k] - max[s]).exp())
            .collect();
        let mut denom = vec![0.0; n_segments];
        for (k, &s) in seg.iter().enumerate() {
            denom[s] += out[k];
        }
        for (k, &s) in seg.iter().enumerate() {
            out[k] /= denom[s];
        }
        let out = Tensor::column(out);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SegmentSoftmax(x, seg.to_vec(), n_segments), rg))
    }

    /// Multiplies row `k` of `x` by the scalar `w[k]` (`w` is `n x 1`).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert!(
            vw.cols() == 1 && vw.rows() == vx.rows(),
            "scale_rows: {:?} by {:?}",
            vx.shape(),
            vw.shape()
        );
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let s = vw.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(&[x, w]);
        self.push(out, Op::ScaleRows(x, w), rg)
    }

    /// Per-row matrix-vector product: row `e` of `m` holds a row-major
    /// `p x q` matrix, row `e` of `v` a `q`-vector; the result is `n x p`.
    pub fn batched_matvec(&mut self, m: Var, v: Var, p: usize, q: usize) -> Var {
        let (vm, vv) = (self.value(m), self.value(v));
        assert!(
            vm.cols() == p * q && vv.cols() == q && vm.rows() == vv.rows(),
            "batched_matvec: {:?} with {:?} as {p}x{q}",
            vm.shape(),
            vv.shape()
        );
        let n = vm.rows();
        let mut out = Tensor::zeros(n, p);
        for e in 0..n {
            let me = vm.row(e);
            let ve = vv.row(e);
            let oe = out.row_mut(e);
            for (a, o) in oe.iter_mut().enumerate() {
                *o = me[a * q..(a + 1) * q]
                    .iter()
                    .zip(ve)
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        let rg = self.rg(&[m, v]);
        self.push(out, Op::BatchedMatVec(m, v, p, q), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.shape() != [1, 1] {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let mut out = vec![None; self.nodes.len()];
        for (i, g) in grads.into_iter().enumerate() {
            if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad {
                out[i] = g;
            }
        }
        Ok(Gradients {
            grads: out,
            params: self.params.clone(),
        })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Tensor)| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let shape = self.nodes[v.0].value.shape();
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
            f(slot);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if wants(*a) {
                    acc(*a, &mut |ga| {
                        gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            false,
                            vb.data(),
                            true,
                            ga.data_mut(),
                            1.0,
                        )
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |gb| {
                        gemm(
                            k,
                            m,
                            n,
                            va.data(),
                            true,
                            g.data(),
                            false,
                            gb.data_mut(),
                            1.0,
                        )
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g, 1.0));
                acc(*b, &mut |gb| add_into(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g, 1.0));
                acc(*b, &mut |gb| add_into(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| elementwise_acc(ga, g, vb, |g, x| g * x));
                acc(*b, &mut |gb| elementwise_acc(gb, g, va, |g, x| g * x));
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g, 1.0));
                acc(*bias, &mut |gb| {
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| add_into(gx, g, *s)),
            Op::AddScalar(x) => acc(*x, &mut |gx| add_into(gx, g, 1.0)),
            Op::Tanh(x) => acc(*x, &mut |gx| {
                elementwise_acc(gx, g, y, |g, t| g * (1.0 - t * t))
            }),
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                let s = *slope;
                acc(*x, &mut |gx| {
                    elementwise_acc(gx, g, vx, |g, v| if v > 0.0 { g } else { s * g })
                });
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    elementwise_acc(gx, g, vx, |g, v| g * sigmoid(v))
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                elementwise_acc(gx, g, y, |g, s| g * s * (1.0 - s))
            }),
            Op::Exp(x) => acc(*x, &mut |gx| elementwise_acc(gx, g, y, |g, e| g * e)),
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| elementwise_acc(gx, g, vx, |g, v| g / v));
            }
            Op::Square(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| elementwise_acc(gx, g, vx, |g, v| 2.0 * g * v));
            }
            Op::Abs(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    elementwise_acc(gx, g, vx, |g, v| if v >= 0.0 { g } else { -g })
                });
            }
            Op::Atan2(ys, xs) => {
                let (vy, vx) = (val(*ys), val(*xs));
                let r2: Vec<f64> = vy
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(a, b)| (a * a + b * b).max(1e-300))
                    .collect();
                acc(*ys, &mut |gy| {
                    for k in 0..gy.len() {
                        gy.data_mut()[k] += g.data()[k] * vx.data()[k] / r2[k];
                    }
                });
                acc(*xs, &mut |gx| {
                    for k in 0..gx.len() {
                        gx.data_mut()[k] -= g.data()[k] * vy.data()[k] / r2[k];
                    }
                });
            }
            Op::Min(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        if va.data()[k] <= vb.data()[k] {
                            ga.data_mut()[k] += g.data()[k];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        if va.data()[k] > vb.data()[k] {
                            gb.data_mut()[k] += g.data()[k];
                        }
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                let (lo, hi) = (*lo, *hi);
                acc(*x, &mut |gx| {
                    elementwise_acc(gx, g, vx, |g, v| if v > lo && v < hi { g } else { 0.0 })
                });
            }
            Op::Sum(x) => {
                let s = g.item();
                acc(*x, &mut |gx| gx.data_mut().iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(x) => {
                let n = val(*x).len().max(1) as f64;
                let s = g.item() / n;
                acc(*x, &mut |gx| gx.data_mut().iter_mut().for_each(|o| *o += s));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |gp| {
                        for r in 0..g.rows() {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let w = g.cols();
                let start = *start;
                acc(*x, &mut |gx| {
                    for r in 0..g.rows() {
                        for (o, v) in gx.row_mut(r)[start..start + w].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let c = g.cols();
                let start = *start;
                acc(*x, &mut |gx| {
                    for (o, v) in gx.data_mut()[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *o += v;
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                acc(*x, &mut |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SegmentSum(x, seg) => {
                acc(*x, &mut |gx| {
                    for (k, &s) in seg.iter().enumerate() {
                        for (o, v) in gx.row_mut(k).iter_mut().zip(g.row(s)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SegmentSoftmax(x, seg, n) => {
                let mut dot = vec![0.0; *n];
                for (k, &s) in seg.iter().enumerate() {
                    dot[s] += g.data()[k] * y.data()[k];
                }
                acc(*x, &mut |gx| {
                    for (k, &s) in seg.iter().enumerate() {
                        gx.data_mut()[k] += y.data()[k] * (g.data()[k] - dot[s]);
                    }
                });
            }
            Op::ScaleRows(x, w) => {
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |gx| {
                    for r in 0..g.rows() {
                        let s = vw.data()[r];
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += v * s;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for r in 0..g.rows() {
                        gw.data_mut()[r] += g
                            .row(r)
                            .iter()
                            .zip(vx.row(r))
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
            }
            Op::BatchedMatVec(m, v, p, q) => {
                let (vm, vv) = (val(*m), val(*v));
                let (p, q) = (*p, *q);
                acc(*m, &mut |gm| {
                    for e in 0..g.rows() {
                        let ge = g.row(e);
                        let ve = vv.row(e);
                        let row = gm.row_mut(e);
                        for a in 0..p {
                            let ga = ge[a];
                            for (o, x) in row[a * q..(a + 1) * q].iter_mut().zip(ve) {
                                *o += ga * x;
                            }
                        }
                    }
                });
                acc(*v, &mut |gv| {
                    for e in 0..g.rows() {
                        let ge = g.row(e);
                        let me = vm.row(e);
                        let row = gv.row_mut(e);
                        for a in 0..p {
                            let ga = ge[a];
                            for (o, x) in row.iter_mut().zip(&me[a * q..(a + 1) * q]) {
                                *o += ga * x;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor, s: f64) {
    for (o, v) in dst.data_mut().iter_mut().zip(src.data()) {
        *o += s * v;
    }
}

fn elementwise_acc(dst: &mut Tensor, g: &Tensor, aux: &Tensor, f: impl Fn(f64, f64) -> f64) {
    for ((o, &gv), &a) in dst.data_mut().iter_mut().zip(g.data()).zip(aux.data()) {
        *o += f(gv, a);
    }
}

/// Gradients of differentiable leaves after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, usize)>,
}

impl Gradients {
    /// `None` when the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 2]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }

    /// `(parameter slot, gradient)` for every [`Tape::param`] leaf that
    /// received a gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|(v, id)| self.get(*v).map(|g| (*id, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::column(vec![1.0, -2.0, 0.5]));
        let sq = t.square(x);
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unrelated_leaf_gets_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.leaf(Tensor::scalar(5.0));
        let loss = t.square(x);
        let g = t.backward(loss).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.get_or_zeros(y, [1, 1]).item(), 0.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::column(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn segment_softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::column(vec![0.7, 0.7]));
        let y = t.segment_softmax(x, &[0, 0], 1).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let x = t.constant(Tensor::column(vec![0.0, 3f64.ln()]));
        let y = t.segment_softmax(x, &[0, 0], 1).unwrap();
        assert!((t.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((t.value(y).data()[1] - 0.75).abs() < 1e-15);

        let x = t.constant(Tensor::column(vec![0.1, -3.0, 2.0, 0.4, 9.0]));
        let seg = [0, 1, 0, 1, 1];
        let y = t.segment_softmax(x, &seg, 2).unwrap();
        let mut sums = [0.0; 2];
        for (k, &s) in seg.iter().enumerate() {
            sums[s] += t.value(y).data()[k];
        }
        assert!((sums[0] - 1.0).abs() < 1e-12 && (sums[1] - 1.0).abs() < 1e-12);

        assert!(t.segment_softmax(x, &[0, 0, 0, 0, 0], 2).is_err());
    }

    #[test]
    fn param_grads_are_reported_by_slot() {
        let mut t = Tape::new();
        let w = t.param(7, &Tensor::scalar(2.0));
        let x = t.constant(Tensor::scalar(3.0));
        let p = t.mul(w, x);
        let g = t.backward(p).unwrap();
        let pg: Vec<_> = g.param_grads().collect();
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, 7);
        assert_eq!(pg[0].1.item(), 3.0);
    }
}
