use std::sync::Arc;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};
use crate::finetune::ctc;
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Point-wise nonlinearity used by the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh approximation of GELU.
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    fn forward<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
            Activation::Gelu => {
                let half = S::lit(0.5);
                let u = S::lit(GELU_C) * (x + S::lit(0.044715) * x * x * x);
                half * x * (S::one() + u.tanh())
            }
        }
    }

    fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Gelu => {
                let half = S::lit(0.5);
                let a = S::lit(0.044715);
                let c = S::lit(GELU_C);
                let th = (c * (x + a * x * x * x)).tanh();
                half * (S::one() + th)
                    + half * x * (S::one() - th * th) * c * (S::one() + S::lit(3.0) * a * x * x)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Activation(Var, Activation),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_left: usize,
    },
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    CosineRows {
        p: Var,
        e: Var,
        pnorm: Vec<S>,
        enorm: Vec<S>,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    ReplaceRows {
        x: Var,
        emb: Var,
        rows: Vec<usize>,
    },
    Ctc {
        logits: Var,
        grad: Tensor<S>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// node list is already a topological order of the computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Softmax of one row over the allowed entries; disallowed outputs are 0.
fn softmax_row<S: Scalar>(x: &[S], allowed: Option<&[bool]>, out: &mut [S]) {
    let ok = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut max = S::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for (j, &v) in x.iter().enumerate() {
        if ok(j) {
            let e = (v - max).exp();
            out[j] = e;
            sum = sum + e;
        } else {
            out[j] = S::zero();
        }
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let out = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(a), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of `[m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.shape(row) != [n] {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(&r) {
                *x = *x + b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale(a, s), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax along the last axis restricted to `allowed` entries (same
    /// layout as the input). Disallowed outputs are exactly zero. Every row
    /// must allow at least one entry.
    pub fn masked_softmax(&mut self, a: Var, allowed: Arc<[bool]>) -> Result<Var> {
        let t = self.value(a);
        if allowed.len() != t.len() {
            return Err(shape_err("masked_softmax", t.shape(), &[allowed.len()]));
        }
        let c = t.cols();
        if allowed.chunks(c).any(|r| !r.iter().any(|&b| b)) {
            return Err(Error::invalid("masked_softmax: a row allows no positions"));
        }
        self.softmax_impl(a, Some(allowed))
    }

    fn softmax_impl(&mut self, a: Var, allowed: Option<Arc<[bool]>>) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = Tensor::zeros(x.shape().to_vec());
        for (r, (xr, or)) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)).enumerate() {
            let m = allowed.as_ref().map(|m| &m[r * c..(r + 1) * c]);
            softmax_row(xr, m, or);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            let lse = crate::scalar::log_sum_exp(row);
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::invalid("log: non-positive input"));
        }
        let t = x.map(|v| v.ln());
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.exp());
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Exp(a), rg))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let c = self.value(x).cols();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = S::from_usize_lossy(c);
        let mut out = Tensor::zeros(xv.shape().to_vec());
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows());
        for (r, row) in xv.data().chunks(c).enumerate() {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            let o = out.row_mut(r);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let t = self.value(a).map(|v| act.forward(v));
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Activation(a, act), rg))
    }

    /// Strided 1-D convolution over time.
    ///
    /// `x` is `[N, C_in]` (time-major), `w` is `[C_out, C_in, K]`, `b` is
    /// `[C_out]`. Requires `K >= stride`; the input is zero-padded by
    /// `K - stride` samples (left half rounded down) so the output has
    /// exactly `floor(N / stride)` frames.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (n, cin) = self.matrix_dims("conv1d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin || self.shape(b) != [ws[0]] {
            return Err(shape_err("conv1d", self.shape(x), &ws));
        }
        let (cout, k) = (ws[0], ws[2]);
        if stride == 0 || k < stride {
            return Err(Error::invalid(format!(
                "conv1d: kernel {k} must be >= stride {stride} > 0"
            )));
        }
        let t_out = n / stride;
        if t_out == 0 {
            return Err(Error::invalid(format!(
                "conv1d: input of {n} frames is shorter than stride {stride}"
            )));
        }
        let pad_left = (k - stride) / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![S::zero(); t_out * cout];
        for t in 0..t_out {
            let base = (t * stride) as isize - pad_left as isize;
            for o in 0..cout {
                let mut acc = bd[o];
                for kk in 0..k {
                    let src = base + kk as isize;
                    if src < 0 || src as usize >= n {
                        continue;
                    }
                    let xrow = &xd[src as usize * cin..(src as usize + 1) * cin];
                    for (c, &xv) in xrow.iter().enumerate() {
                        acc = acc + wd[(o * cin + c) * k + kk] * xv;
                    }
                }
                out[t * cout + o] = acc;
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::new([t_out, cout], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            },
            rg,
        ))
    }

    /// Selects rows of a matrix (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("gather_rows", a)?;
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows: empty row list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::invalid(format!("gather_rows: row {bad} out of range for {m} rows")));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(x.row(r));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new([rows.len(), n], data)?, Op::GatherRows(a, rows.to_vec()), rg))
    }

    /// Picks individual `(row, col)` entries of a matrix into a vector.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.matrix_dims("pick", a)?;
        if entries.is_empty() {
            return Err(Error::invalid("pick: empty entry list"));
        }
        if let Some(&(r, c)) = entries.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::invalid(format!("pick: entry ({r}, {c}) out of range for [{m}, {n}]")));
        }
        let x = self.value(a);
        let data = entries.iter().map(|&(r, c)| x.at(r, c)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(data), Op::Pick(a, entries.to_vec()), rg))
    }

    /// Cosine similarity between every row of `p` (`[m, d]`) and every row
    /// of `e` (`[c, d]`), giving `[m, c]`. Zero-norm rows are rejected.
    pub fn cosine_rows(&mut self, p: Var, e: Var) -> Result<Var> {
        let (m, d) = self.matrix_dims("cosine_rows", p)?;
        let (c, d2) = self.matrix_dims("cosine_rows", e)?;
        if d != d2 {
            return Err(shape_err("cosine_rows", self.shape(p), self.shape(e)));
        }
        let pv = self.value(p);
        let ev = self.value(e);
        let norms = |t: &Tensor<S>, rows: usize, what: &str| -> Result<Vec<S>> {
            (0..rows)
                .map(|r| {
                    let nrm = t.row(r).iter().map(|&v| v * v).sum::<S>().sqrt();
                    if nrm == S::zero() {
                        Err(Error::invalid(format!(
                            "cosine similarity undefined: {what} row {r} has zero norm"
                        )))
                    } else {
                        Ok(nrm)
                    }
                })
                .collect()
        };
        let pnorm = norms(pv, m, "query")?;
        let enorm = norms(ev, c, "codeword")?;
        let mut out = vec![S::zero(); m * c];
        for i in 0..m {
            let pr = pv.row(i);
            for j in 0..c {
                let dot: S = pr.iter().zip(ev.row(j)).map(|(&a, &b)| a * b).sum();
                out[i * c + j] = dot / (pnorm[i] * enorm[j]);
            }
        }
        let rg = self.rg(&[p, e]);
        Ok(self.push(
            Tensor::new([m, c], out)?,
            Op::CosineRows { p, e, pnorm, enorm },
            rg,
        ))
    }

    /// Concatenation along the last axis of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let (m, _) = self.matrix_dims("concat", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &v in parts {
            let (r, c) = self.matrix_dims("concat", v)?;
            if r != m {
                return Err(shape_err("concat", self.shape(first), self.shape(v)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &v in parts {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new([m, total], data)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(shape_err("slice_cols", self.shape(a), &[start, len]));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new([m, len], data)?, Op::SliceCols { x: a, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: S = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    /// Replaces the listed rows of `x` (`[T, D]`) by the vector `emb` (`[D]`).
    pub fn replace_rows(&mut self, x: Var, emb: Var, rows: &[usize]) -> Result<Var> {
        let (t, d) = self.matrix_dims("replace_rows", x)?;
        if self.shape(emb) != [d] {
            return Err(shape_err("replace_rows", self.shape(x), self.shape(emb)));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= t) {
            return Err(Error::invalid(format!("mask index {bad} out of range for {t} frames")));
        }
        let e = self.value(emb).data().to_vec();
        let mut out = self.value(x).clone();
        for &r in rows {
            out.row_mut(r).copy_from_slice(&e);
        }
        let rg = self.rg(&[x, emb]);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                x,
                emb,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// CTC negative log-likelihood of `labels` under per-frame logits
    /// `[T, V+1]` (blank at index 0). Returns a scalar node.
    pub fn ctc_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = ctc::ctc_loss_and_grad(self.value(logits), labels)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::Ctc { logits, grad }, rg))
    }

    /// Back-propagates from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), S::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    let da = matmul_raw(gd, &bt, m, n, k);
                    accumulate(grads, *a, Tensor::new([m, k], da).unwrap());
                }
                if self.needs(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    let db = matmul_raw(&at, gd, k, m, n);
                    accumulate(grads, *b, Tensor::new([k, n], db).unwrap());
                }
            }
            Op::Transpose(a) => {
                let s = g.shape();
                let d = transpose_raw(gd, s[0], s[1]);
                accumulate(grads, *a, Tensor::new([s[1], s[0]], d).unwrap());
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, r) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*r) {
                    let n = g.cols();
                    let mut d = vec![S::zero(); n];
                    for chunk in gd.chunks(n) {
                        for (x, &y) in d.iter_mut().zip(chunk) {
                            *x = *x + y;
                        }
                    }
                    accumulate(grads, *r, Tensor::vector(d));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * *s)),
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![S::zero(); y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(gd.chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![S::zero(); y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(gd.chunks(c)).zip(d.chunks_mut(c)) {
                    let gs: S = gr.iter().copied().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d = gd.iter().zip(x.data()).map(|(&q, &v)| q / v).collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(node.value.data()).map(|(&q, &y)| q * y).collect();
                accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let gv = self.value(*gamma).data();
                let n = S::from_usize_lossy(c);
                if self.needs(*x) {
                    let mut d = vec![S::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &gd[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for j in 0..c {
                            d[r * c + j] = rs * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                if self.needs(*gamma) {
                    let mut d = vec![S::zero(); c];
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] = d[j] + gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gamma, Tensor::vector(d));
                }
                if self.needs(*beta) {
                    let mut d = vec![S::zero(); c];
                    for gr in gd.chunks(c) {
                        for j in 0..c {
                            d[j] = d[j] + gr[j];
                        }
                    }
                    accumulate(grads, *beta, Tensor::vector(d));
                }
            }
            Op::Activation(a, act) => {
                let x = self.value(*a);
                let d = gd
                    .iter()
                    .zip(x.data())
                    .map(|(&q, &v)| q * act.derivative(v))
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, cin) = (xv.shape()[0], xv.shape()[1]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let t_out = g.shape()[0];
                let (nx, nw, nb) = (self.needs(*x), self.needs(*w), self.needs(*b));
                let mut dx = if nx { vec![S::zero(); n * cin] } else { Vec::new() };
                let mut dw = if nw { vec![S::zero(); wv.len()] } else { Vec::new() };
                let mut db = vec![S::zero(); cout];
                let xd = xv.data();
                let wd = wv.data();
                for t in 0..t_out {
                    let base = (t * stride) as isize - *pad_left as isize;
                    for o in 0..cout {
                        let go = gd[t * cout + o];
                        db[o] = db[o] + go;
                        if go == S::zero() || !(nx || nw) {
                            continue;
                        }
                        for kk in 0..k {
                            let src = base + kk as isize;
                            if src < 0 || src as usize >= n {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..cin {
                                let wi = (o * cin + c) * k + kk;
                                if nx {
                                    dx[src * cin + c] = dx[src * cin + c] + wd[wi] * go;
                                }
                                if nw {
                                    dw[wi] = dw[wi] + xd[src * cin + c] * go;
                                }
                            }
                        }
                    }
                }
                if nx {
                    accumulate(grads, *x, Tensor::new([n, cin], dx).unwrap());
                }
                if nw {
                    accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                if nb {
                    accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::GatherRows(a, rows) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.shape().to_vec());
                for (i, &r) in rows.iter().enumerate() {
                    for (dst, &src) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *dst = *dst + src;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Pick(a, entries) => {
                let x = self.value(*a);
                let n = x.cols();
                let mut d = Tensor::zeros(x.shape().to_vec());
                for (i, &(r, c)) in entries.iter().enumerate() {
                    let slot = &mut d.data_mut()[r * n + c];
                    *slot = *slot + gd[i];
                }
                accumulate(grads, *a, d);
            }
            Op::CosineRows { p, e, pnorm, enorm } => {
                let pv = self.value(*p);
                let ev = self.value(*e);
                let sim = &node.value;
                let (m, c) = (sim.shape()[0], sim.shape()[1]);
                let dim = pv.cols();
                if self.needs(*p) {
                    let mut d = Tensor::zeros(pv.shape().to_vec());
                    for i in 0..m {
                        let pr = pv.row(i);
                        let dr = d.row_mut(i);
                        for j in 0..c {
                            let gij = gd[i * c + j];
                            if gij == S::zero() {
                                continue;
                            }
                            let s = sim.at(i, j);
                            let er = ev.row(j);
                            let a = gij / (pnorm[i] * enorm[j]);
                            let bcoef = gij * s / (pnorm[i] * pnorm[i]);
                            for q in 0..dim {
                                dr[q] = dr[q] + a * er[q] - bcoef * pr[q];
                            }
                        }
                    }
                    accumulate(grads, *p, d);
                }
                if self.needs(*e) {
                    let mut d = Tensor::zeros(ev.shape().to_vec());
                    for i in 0..m {
                        let pr = pv.row(i);
                        for j in 0..c {
                            let gij = gd[i * c + j];
                            if gij == S::zero() {
                                continue;
                            }
                            let s = sim.at(i, j);
                            let er = ev.row(j).to_vec();
                            let a = gij / (pnorm[i] * enorm[j]);
                            let bcoef = gij * s / (enorm[j] * enorm[j]);
                            let dr = d.row_mut(j);
                            for q in 0..dim {
                                dr[q] = dr[q] + a * pr[q] - bcoef * er[q];
                            }
                        }
                    }
                    accumulate(grads, *e, d);
                }
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &v in parts {
                    let w = self.value(v).cols();
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for row in gd.chunks(total) {
                            d.extend_from_slice(&row[offset..offset + w]);
                        }
                        accumulate(grads, v, Tensor::new([g.rows(), w], d).unwrap());
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let w = g.cols();
                let mut d = Tensor::zeros(xv.shape().to_vec());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, d);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, Tensor::full(x.shape().to_vec(), gd[0]));
            }
            Op::ReplaceRows { x, emb, rows } => {
                if self.needs(*x) {
                    let mut d = g.clone();
                    for &r in rows {
                        d.row_mut(r).iter_mut().for_each(|v| *v = S::zero());
                    }
                    accumulate(grads, *x, d);
                }
                if self.needs(*emb) {
                    let dcols = g.cols();
                    let mut d = vec![S::zero(); dcols];
                    let mut seen = rows.clone();
                    seen.sort_unstable();
                    seen.dedup();
                    for r in seen {
                        for (a, &b) in d.iter_mut().zip(g.row(r)) {
                            *a = *a + b;
                        }
                    }
                    accumulate(grads, *emb, Tensor::vector(d));
                }
            }
            Op::Ctc { logits, grad } => {
                accumulate(grads, *logits, grad.map(|v| v * gd[0]));
            }
        }
    }
}
