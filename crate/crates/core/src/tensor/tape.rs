use crate::error::{Error, Result};

use super::{gemm, gemm_nt, gemm_tn, record_macs, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    IndexRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    MeanRows(Var),
    RowSums(Var),
    DivRows(Var, Var),
    StopGradient,
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.expect_matrix("matmul")?;
        let (k2, n) = bv.expect_matrix("matmul")?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul: inner extents differ for shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(av.data(), bv.data(), m, k, n, &mut out);
        record_macs((m * k * n) as u64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.expect_matrix("matmul_nt")?;
        let (n, k2) = bv.expect_matrix("matmul_nt")?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul_nt: feature extents differ for shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(av.data(), bv.data(), m, k, n, &mut out);
        record_macs((m * k * n) as u64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(row));
        let (_, c) = xv.expect_matrix("add_row")?;
        if bv.len() != c {
            return Err(dim_err(format!(
                "add_row: row of {} values cannot broadcast over shape {:?}",
                bv.len(),
                xv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// `x · W + b` with `W` of shape `in×out` and `b` of length `out`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|v| v * s).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if xv.rank() == 0 || c == 0 {
            return Err(dim_err(format!("softmax_rows: empty last axis in shape {:?}", xv.shape())));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::param("eps", format!("must be positive, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if c == 0 || gv.len() != c || bv.len() != c {
            return Err(dim_err(format!(
                "layer_norm: input {:?} with gain {:?} and bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Selects rows by a strictly increasing index list.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, _) = xv.expect_matrix("gather_rows")?;
        for (k, &i) in idx.iter().enumerate() {
            if i >= r {
                return Err(Error::Index(format!("gather_rows: index {i} out of range for {r} rows")));
            }
            if k > 0 && idx[k - 1] >= i {
                return Err(Error::Index(format!(
                    "gather_rows: indices must be strictly increasing, found {} before {i}",
                    idx[k - 1]
                )));
            }
        }
        let out = take_rows(xv, idx)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Row lookup that allows repeats, e.g. embedding tables.
    pub fn index_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, _) = tv.expect_matrix("index_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("index_rows: index {bad} out of range for {r} rows")));
        }
        let out = take_rows(tv, ids)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::IndexRows(table, ids.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.value(p).expect_matrix("concat_rows")?.1,
            None => return Err(dim_err("concat_rows: no inputs".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).expect_matrix("concat_rows")?;
            if pc != c {
                return Err(dim_err(format!("concat_rows: column counts {c} and {pc} differ")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.expect_matrix("slice_cols")?;
        if start + width > c {
            return Err(Error::Index(format!(
                "slice_cols: columns {start}..{} out of range for {c}",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&xv.data()[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, width], data)?, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = match parts.first() {
            Some(&p) => self.value(p).expect_matrix("concat_cols")?.0,
            None => return Err(dim_err("concat_cols: no inputs".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).expect_matrix("concat_cols")?;
            if pr != r {
                return Err(dim_err(format!("concat_cols: row counts {r} and {pr} differ")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Mean over the token (row) axis; returns a `1×c` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.expect_matrix("mean_rows")?;
        if r == 0 {
            return Err(dim_err("mean_rows: zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x), rg))
    }

    /// Sum of each row; returns a length-`r` vector.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, c) = xv.expect_matrix("row_sums")?;
        let out: Vec<f64> = xv.data().chunks(c).map(|row| row.iter().sum()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::RowSums(x), rg))
    }

    /// Divides row `i` of `x` by `den[i]`. Rows with a zero denominator
    /// produce zeros and pass no gradient.
    pub fn div_rows(&mut self, x: Var, den: Var) -> Result<Var> {
        let (xv, dv) = (self.value(x), self.value(den));
        let (r, c) = xv.expect_matrix("div_rows")?;
        if dv.len() != r {
            return Err(dim_err(format!(
                "div_rows: {} denominators for {r} rows",
                dv.len()
            )));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let d = dv.data()[i];
            if d != 0.0 {
                for j in 0..c {
                    out[i * c + j] = xv.data()[i * c + j] / d;
                }
            }
        }
        let rg = self.rg(x) || self.rg(den);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::DivRows(x, den), rg))
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Softmax cross-entropy of a single logit row against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.len();
        if lv.rows() != 1 && lv.rank() != 1 {
            return Err(dim_err(format!("cross_entropy expects one logit row, got {:?}", lv.shape())));
        }
        if target >= c {
            return Err(Error::Data(format!("label {target} out of range for {c} classes")));
        }
        let mut probs = lv.data().to_vec();
        softmax_in_place(&mut probs);
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[target];
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar root. Every node is visited once, in
    /// reverse creation order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = grads[id].take() else { continue };
            self.backprop_node(node, &dout, &mut grads);
            grads[id] = Some(dout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = dout.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.rg(*a) {
                    accumulate(grads, *a, av.shape(), |buf| gemm_nt(g, bv.data(), m, n, k, buf));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, bv.shape(), |buf| gemm_tn(av.data(), g, m, k, n, buf));
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.rows();
                if self.rg(*a) {
                    accumulate(grads, *a, av.shape(), |buf| gemm(g, bv.data(), m, n, k, buf));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, bv.shape(), |buf| gemm_tn(g, av.data(), m, n, k, buf));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        accumulate(grads, v, dout.shape(), |buf| add_into(buf, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, dout.shape(), |buf| add_into(buf, g));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, dout.shape(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    accumulate(grads, *a, av.shape(), |buf| {
                        for ((o, gv), y) in buf.iter_mut().zip(g).zip(bv.data()) {
                            *o += gv * y;
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(grads, *b, bv.shape(), |buf| {
                        for ((o, gv), x) in buf.iter_mut().zip(g).zip(av.data()) {
                            *o += gv * x;
                        }
                    });
                }
            }
            Op::AddRow(x, row) => {
                if self.rg(*x) {
                    accumulate(grads, *x, dout.shape(), |buf| add_into(buf, g));
                }
                if self.rg(*row) {
                    let rv = self.value(*row);
                    let c = rv.len();
                    accumulate(grads, *row, rv.shape(), |buf| {
                        for chunk in g.chunks(c) {
                            add_into(buf, chunk);
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, dout.shape(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, v)| *o += v * s)
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv.shape(), |buf| {
                    for ((o, gv), &v) in buf.iter_mut().zip(g).zip(xv.data()) {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *o += gv * d;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                accumulate(grads, *x, y.shape(), |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in brow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let c = gv.len();
                if self.rg(*gain) {
                    accumulate(grads, *gain, gv.shape(), |buf| {
                        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ((o, a), h) in buf.iter_mut().zip(grow).zip(hrow) {
                                *o += a * h;
                            }
                        }
                    });
                }
                if self.rg(*bias) {
                    let bv = self.value(*bias);
                    accumulate(grads, *bias, bv.shape(), |buf| {
                        for grow in g.chunks(c) {
                            add_into(buf, grow);
                        }
                    });
                }
                if self.rg(*x) {
                    accumulate(grads, *x, dout.shape(), |buf| {
                        let inv_c = 1.0 / c as f64;
                        let mut dxhat = vec![0.0; c];
                        for (r, (brow, grow)) in buf.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                            let hrow = &xhat[r * c..(r + 1) * c];
                            for j in 0..c {
                                dxhat[j] = grow[j] * gv.data()[j];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() * inv_c;
                            let mean_dh = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() * inv_c;
                            for j in 0..c {
                                brow[j] += inv_std[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                            }
                        }
                    });
                }
            }
            Op::GatherRows(x, idx) | Op::IndexRows(x, idx) => {
                let xv = self.value(*x);
                let c = xv.cols();
                accumulate(grads, *x, xv.shape(), |buf| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut buf[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.rg(p) {
                        accumulate(grads, p, pv.shape(), |buf| add_into(buf, &g[offset..offset + n]));
                    }
                    offset += n;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let w = dout.cols();
                accumulate(grads, *x, xv.shape(), |buf| {
                    for (i, grow) in g.chunks(w).enumerate() {
                        add_into(&mut buf[i * c + start..i * c + start + w], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = dout.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.rg(p) {
                        accumulate(grads, p, pv.shape(), |buf| {
                            for (i, brow) in buf.chunks_mut(w).enumerate() {
                                add_into(brow, &g[i * total + offset..i * total + offset + w]);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                accumulate(grads, *x, xv.shape(), |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let inv = 1.0 / xv.rows() as f64;
                accumulate(grads, *x, xv.shape(), |buf| {
                    for brow in buf.chunks_mut(g.len()) {
                        brow.iter_mut().zip(g).for_each(|(o, v)| *o += v * inv);
                    }
                });
            }
            Op::RowSums(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                accumulate(grads, *x, xv.shape(), |buf| {
                    for (brow, gv) in buf.chunks_mut(c).zip(g) {
                        brow.iter_mut().for_each(|o| *o += gv);
                    }
                });
            }
            Op::DivRows(x, den) => {
                let (xv, dv) = (self.value(*x), self.value(*den));
                let c = xv.cols();
                if self.rg(*x) {
                    accumulate(grads, *x, xv.shape(), |buf| {
                        for (i, brow) in buf.chunks_mut(c).enumerate() {
                            let d = dv.data()[i];
                            if d != 0.0 {
                                for (o, gv) in brow.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                                    *o += gv / d;
                                }
                            }
                        }
                    });
                }
                if self.rg(*den) {
                    accumulate(grads, *den, dv.shape(), |buf| {
                        for (i, o) in buf.iter_mut().enumerate() {
                            let d = dv.data()[i];
                            if d != 0.0 {
                                let s: f64 = g[i * c..(i + 1) * c]
                                    .iter()
                                    .zip(&xv.data()[i * c..(i + 1) * c])
                                    .map(|(a, b)| a * b)
                                    .sum();
                                *o -= s / (d * d);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let lv = self.value(*logits);
                let scale = g[0];
                accumulate(grads, *logits, lv.shape(), |buf| {
                    for (j, (o, p)) in buf.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *o += scale * (p - onehot);
                    }
                });
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let s = g[0];
                accumulate(grads, *x, xv.shape(), |buf| buf.iter_mut().for_each(|o| *o += s));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

fn add_into(buf: &mut [f64], src: &[f64]) {
    buf.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

fn take_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let c = x.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![idx.len(), c], data)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
}
