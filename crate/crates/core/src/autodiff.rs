//! Reverse-mode differentiation over a recorded graph of matrix operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node index order is already a topological order
//! and [`Graph::backward`] simply walks it in reverse.

use crate::error::{Error, Result};
use crate::tensor::{exp_nonpositive, gemm, Tensor};

/// Clamp applied to probabilities before taking logs in [`Graph::bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        a: Var,
        index: Vec<usize>,
    },
    Bce {
        target: Tensor,
        p: Var,
    },
    Sum(Var),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. One graph per forward pass; it can be
/// differentiated once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    differentiated: bool,
}

/// Gradients of a scalar with respect to the leaves of the graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when no gradient reached the node (it is exactly zero).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, materialising zeros when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::new(like.shape().to_vec(), vec![0.0; like.numel()])
                .expect("shape copied from a valid tensor"),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape as input")
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Same value as `a`; backward stops here so no ancestor of `a`
    /// receives gradient through this node.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    fn mm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}] (ta={ta}, tb={tb})"),
            ));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(
            ta,
            tb,
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            out.data_mut(),
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let (rr, rc) = self.value(row).dims2()?;
        if rr != 1 || rc != n {
            return Err(Error::dim("add_row", format!("[{m}, {n}] + [{rr}, {rc}]")));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n.max(1)) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(out, Op::AddRow { a, row }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.value(a).dims2()?;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = exp_nonpositive(*v - max);
            }
            for v in row.iter() {
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Per-row normalisation to zero mean and unit variance followed by
    /// `gain * x + bias`, with `gain` and `bias` shaped `[1, n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        for p in [gain, bias] {
            let s = self.value(p).shape();
            if s != [1, n] {
                return Err(Error::dim("layer_norm", format!("affine {s:?} for width {n}")));
            }
        }
        if n == 0 {
            return Err(Error::dim("layer_norm", "zero-width rows"));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                normalized[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start > end || end > n {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {n}")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let out = Tensor::matrix(m, w, out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let m = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(Error::dim("concat_cols", format!("{r} rows vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start > end || end > m {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {m}")));
        }
        let out = Tensor::matrix(
            end - start,
            n,
            self.value(a).data()[start * n..end * n].to_vec(),
        )?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::SliceRows { a, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let n = self.value(*first).dims2()?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != n {
                return Err(Error::dim("concat_rows", format!("{c} cols vs {n}")));
            }
            data.extend_from_slice(self.value(p).data());
            m += r;
        }
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Rows of `a` in the order given by `index` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let out = self.value(a).gather_rows(index)?;
        let ng = self.ng(&[a]);
        Ok(self.push(
            out,
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Summed binary cross entropy `sum(-y ln p - (1 - y) ln(1 - p))` with
    /// `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`. Returns a `[1, 1]` scalar.
    pub fn bce(&mut self, target: &Tensor, p: Var) -> Result<Var> {
        same_shape("bce", target, self.value(p))?;
        let mut total = 0.0;
        for (&y, &pv) in target.data().iter().zip(self.value(p).data()) {
            let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            total += -y * pc.ln() - (1.0 - y) * (1.0 - pc).ln();
        }
        let ng = self.ng(&[p]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Bce {
                target: target.clone(),
                p,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Differentiates the scalar `loss` with respect to every node.
    /// A graph can only be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::Graph(
                "backward already ran on this graph; build a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            // Only leaf gradients are reported; the rest can go.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (m, n) = out.dims2()?;
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = if ta { av.rows() } else { av.cols() };
                if self.needs_grad(*a) {
                    let da = self.acc(grads, *a);
                    if ta {
                        gemm(tb, true, k, n, m, 1.0, bv.data(), gd, 1.0, da);
                    } else {
                        gemm(false, !tb, m, n, k, 1.0, gd, bv.data(), 1.0, da);
                    }
                }
                if self.needs_grad(*b) {
                    let db = self.acc(grads, *b);
                    if tb {
                        gemm(true, ta, n, m, k, 1.0, gd, av.data(), 1.0, db);
                    } else {
                        gemm(!ta, false, k, m, n, 1.0, av.data(), gd, 1.0, db);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_scaled(grads, *a, gd, 1.0);
                self.acc_scaled(grads, *b, gd, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(grads, *a, gd, 1.0);
                self.acc_scaled(grads, *b, gd, -1.0);
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    let bv = self.value(*b).data();
                    let da = self.acc(grads, *a);
                    for ((d, &g), &y) in da.iter_mut().zip(gd).zip(bv) {
                        *d += g * y;
                    }
                }
                if self.needs_grad(*b) {
                    let av = self.value(*a).data();
                    let db = self.acc(grads, *b);
                    for ((d, &g), &x) in db.iter_mut().zip(gd).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::AddRow { a, row } => {
                self.acc_scaled(grads, *a, gd, 1.0);
                if self.needs_grad(*row) {
                    let n = out.cols();
                    let dr = self.acc(grads, *row);
                    for chunk in gd.chunks(n.max(1)) {
                        for (d, &g) in dr.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Scale(a, s) => self.acc_scaled(grads, *a, gd, *s),
            Op::Sigmoid(a) => {
                if self.needs_grad(*a) {
                    let da = self.acc(grads, *a);
                    for ((d, &g), &y) in da.iter_mut().zip(gd).zip(out.data()) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs_grad(*a) {
                    let da = self.acc(grads, *a);
                    for ((d, &g), &y) in da.iter_mut().zip(gd).zip(out.data()) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs_grad(*a) {
                    let xv = self.value(*a).data();
                    let da = self.acc(grads, *a);
                    for ((d, &g), &x) in da.iter_mut().zip(gd).zip(xv) {
                        if x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs_grad(*a) {
                    let n = out.cols().max(1);
                    let da = self.acc(grads, *a);
                    for ((drow, grow), yrow) in da
                        .chunks_mut(n)
                        .zip(gd.chunks(n))
                        .zip(out.data().chunks(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (m, n) = out.dims2()?;
                if self.needs_grad(*bias) {
                    let db = self.acc(grads, *bias);
                    for chunk in gd.chunks(n) {
                        for (d, &g) in db.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                }
                if self.needs_grad(*gain) {
                    let dg = self.acc(grads, *gain);
                    for (gchunk, hchunk) in gd.chunks(n).zip(normalized.chunks(n)) {
                        for ((d, &g), &h) in dg.iter_mut().zip(gchunk).zip(hchunk) {
                            *d += g * h;
                        }
                    }
                }
                if self.needs_grad(*x) {
                    let gain_v = self.value(*gain).data().to_vec();
                    let dx = self.acc(grads, *x);
                    let nf = n as f64;
                    let mut dh = vec![0.0; n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        let hrow = &normalized[i * n..(i + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            dh[j] = grow[j] * gain_v[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh /= nf;
                        mean_dh_h /= nf;
                        let is = inv_std[i];
                        for j in 0..n {
                            dx[i * n + j] += is * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.needs_grad(*a) {
                    let (m, w) = out.dims2()?;
                    let n = self.value(*a).cols();
                    let da = self.acc(grads, *a);
                    for r in 0..m {
                        for c in 0..w {
                            da[r * n + start + c] += gd[r * w + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs_grad(p) {
                        let dp = self.acc(grads, p);
                        for r in 0..m {
                            for c in 0..w {
                                dp[r * w + c] += gd[r * n + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { a, start } => {
                if self.needs_grad(*a) {
                    let n = out.cols();
                    let da = self.acc(grads, *a);
                    for (d, &g) in da[start * n..start * n + gd.len()].iter_mut().zip(gd) {
                        *d += g;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs_grad(p) {
                        let dp = self.acc(grads, p);
                        for (d, &g) in dp.iter_mut().zip(&gd[offset..offset + len]) {
                            *d += g;
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows { a, index } => {
                if self.needs_grad(*a) {
                    let n = out.cols();
                    let da = self.acc(grads, *a);
                    for (k, &src) in index.iter().enumerate() {
                        for c in 0..n {
                            da[src * n + c] += gd[k * n + c];
                        }
                    }
                }
            }
            Op::Bce { target, p } => {
                if self.needs_grad(*p) {
                    let g0 = gd[0];
                    let pv = self.value(*p).data();
                    let dp = self.acc(grads, *p);
                    for ((d, &y), &pr) in dp.iter_mut().zip(target.data()).zip(pv) {
                        let pc = pr.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        *d += g0 * (pc - y) / (pc * (1.0 - pc));
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs_grad(*a) {
                    let g0 = gd[0];
                    for d in self.acc(grads, *a).iter_mut() {
                        *d += g0;
                    }
                }
            }
        }
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let like = &self.nodes[v.0].value;
            *slot = Some(
                Tensor::new(like.shape().to_vec(), vec![0.0; like.numel()])
                    .expect("shape copied from a valid tensor"),
            );
        }
        slot.as_mut().expect("just initialised").data_mut()
    }

    fn acc_scaled(&self, grads: &mut [Option<Tensor>], v: Var, g: &[f64], s: f64) {
        if !self.needs_grad(v) {
            return;
        }
        for (d, &x) in self.acc(grads, v).iter_mut().zip(g) {
            *d += s * x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 3.0, -3.0]));
        let y = g.sigmoid(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::scalar(0.5));
        let l = g.bce(&Tensor::scalar(1.0), p).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_near_perfect_is_tiny() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::scalar(1.0 - BCE_EPS));
        let l = g.bce(&Tensor::scalar(1.0), p).unwrap();
        assert!(g.scalar(l) < 2e-7);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
        assert!(matches!(g.backward(y), Err(Error::Graph(_))));
    }

    #[test]
    fn stop_gradient_cuts_ancestors() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(3.0));
        let x = g.param(Tensor::scalar(2.0));
        let h = g.mul(w, x).unwrap();
        let cut = g.stop_gradient(h);
        let v = g.param(Tensor::scalar(5.0));
        let y = g.mul(cut, v).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(v).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_errors_surface() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(2, 3));
        let b = g.param(Tensor::zeros(2, 3));
        assert!(g.matmul(a, b).is_err());
        assert!(g.matmul_nt(a, b).is_ok());
        let r = g.constant(Tensor::zeros(1, 2));
        assert!(g.add_row(a, r).is_err());
        assert!(g.slice_cols(a, 2, 4).is_err());
    }

    #[test]
    fn constant_row_layer_norm_is_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(2, 4, 7.0));
        let gain = g.constant(Tensor::full(1, 4, 1.0));
        let bias = g.constant(Tensor::zeros(1, 4));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }
}
