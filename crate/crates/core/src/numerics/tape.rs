use crate::error::{Error, Result};
use crate::numerics::kernels::{axpy, dot, matmul, matmul_nt, matmul_tn};
use crate::numerics::tensor::{logsumexp, softmax_into};
use crate::numerics::{Gradients, ParamId, ParamStore, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Vector-Jacobian product for an operation defined outside this module.
pub trait CustomOp: Send + Sync {
    /// Returns one gradient per input (same length as the input's data), or
    /// `None` where the input receives nothing.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        valid: usize,
    },
    LogSoftmax(Var),
    LogSumExp(Var),
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Rows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    FrameStack {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaskRows {
        x: Var,
        valid: usize,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of tensor operations, replayed in reverse by
/// [`Tape::backward`].
///
/// Parameters are borrowed from a [`ParamStore`] rather than copied; every
/// other value is owned by the tape. Shapes are treated as matrices
/// (`rows × last dim`).
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("param node without store")
                .get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a parameter from the attached store. Repeated calls for the
    /// same id return the same variable so gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if self.params.is_none() {
            return Err(Error::NoParameters);
        }
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .ok_or(Error::NoParameters)?
            .id(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        self.param(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let c = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let c = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMulNT(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), needs))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let b = self.value(bias);
        if b.len() != cols {
            return Err(Error::shape(format!(
                "bias of {} values for {cols} columns",
                b.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::AddRow(x, bias),
            needs,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::shape(format!(
                "mul {:?} * {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, factor), needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(x), needs)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape("layer_norm affine size mismatch"));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Row-wise softmax over the first `valid` columns; the remaining
    /// columns are exactly zero.
    pub fn softmax_prefix(&mut self, x: Var, valid: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if valid == 0 || valid > cols {
            return Err(Error::shape(format!("softmax over {valid} of {cols} columns")));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_into(
                &xs[r * cols..r * cols + valid],
                &mut out[r * cols..r * cols + valid],
            );
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::Softmax { x, valid },
            needs,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.dims(x).1;
        self.softmax_prefix(x, cols)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if cols == 0 {
            return Err(Error::EmptyDimension);
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let lse = logsumexp(row);
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::LogSoftmax(x),
            needs,
        ))
    }

    /// Row-wise `log Σ exp`; output has one value per row.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if cols == 0 {
            return Err(Error::EmptyDimension);
        }
        let xs = self.value(x).data();
        let out = (0..rows)
            .map(|r| logsumexp(&xs[r * cols..(r + 1) * cols]))
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![rows], out), Op::LogSumExp(x), needs))
    }

    /// Columns `[start, start+len)`.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start + len > cols {
            return Err(Error::shape(format!(
                "column slice {start}..{} of {cols}",
                start + len
            )));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xs[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], out),
            Op::Cols { x, start },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape("concat_cols row mismatch"));
            }
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    /// Rows `[start, start+len)`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start + len > rows {
            return Err(Error::shape(format!(
                "row slice {start}..{} of {rows}",
                start + len
            )));
        }
        let out = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![len, cols], out),
            Op::Rows { x, start },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims(parts[0]).1;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows column mismatch"));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols.max(1);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::InvalidToken(i));
            }
            out.extend_from_slice(t.row(i));
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), cols], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Stacks `kernel` neighbouring rows (zero outside the input) into one
    /// output row per stride step, so a strided 1-D convolution becomes a
    /// single matmul. Output has `(T + 2·pad − kernel) / stride + 1` rows.
    pub fn frame_stack(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (t_in, c) = self.dims(x);
        if t_in + 2 * pad < kernel || stride == 0 {
            return Err(Error::shape("frame_stack input shorter than kernel"));
        }
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let xs = self.value(x).data();
        let width = kernel * c;
        let mut out = vec![0.0; t_out * width];
        for j in 0..t_out {
            for k in 0..kernel {
                let src = (j * stride + k) as isize - pad as isize;
                if src >= 0 && (src as usize) < t_in {
                    let s = src as usize;
                    out[j * width + k * c..j * width + (k + 1) * c]
                        .copy_from_slice(&xs[s * c..(s + 1) * c]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![t_out, width], out),
            Op::FrameStack {
                x,
                kernel,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Sets rows at index `>= valid` to exactly zero.
    pub fn mask_rows(&mut self, x: Var, valid: usize) -> Var {
        let (rows, cols) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        if valid < rows {
            out[valid * cols..].iter_mut().for_each(|v| *v = 0.0);
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::MaskRows { x, valid },
            needs,
        )
    }

    /// Per-channel convolution along rows with an odd `kernel × C` filter and
    /// zero "same" padding.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.dims(x);
        let (k, cw) = self.dims(w);
        if cw != c || k % 2 == 0 {
            return Err(Error::shape("depthwise kernel must be odd × channels"));
        }
        let pad = k / 2;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; t * c];
        for row in 0..t {
            let o = &mut out[row * c..(row + 1) * c];
            for kk in 0..k {
                let src = (row + kk) as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let s = src as usize;
                for ch in 0..c {
                    o[ch] += xs[s * c + ch] * ws[kk * c + ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            Tensor::from_parts(vec![t, c], out),
            Op::DepthwiseConv { x, w },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Records an externally computed value with a caller-supplied VJP.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`. Every parameter of the attached
    /// store gets a gradient tensor, zero if it did not participate.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let store = self.params.ok_or(Error::NoParameters)?;
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = store.zeros_like();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = self.value(Var(i));
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (o, v) in out.get_mut(*id).data_mut().iter_mut().zip(&g) {
                        *o += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    if self.needs(*a) {
                        let da = matmul_nt(&g, self.value(*b).data(), m, n, k);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = matmul_tn(self.value(*a).data(), &g, m, k, n);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).0;
                    if self.needs(*a) {
                        let da = matmul(&g, self.value(*b).data(), m, n, k);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = matmul_tn(&g, self.value(*a).data(), m, n, k);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(x, bias) => {
                    let cols = y.cols();
                    if self.needs(*bias) {
                        let mut db = vec![0.0; cols];
                        for row in g.chunks(cols) {
                            axpy(1.0, row, &mut db);
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let bv = self.value(*b).data();
                        accumulate(&mut grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    }
                    if self.needs(*b) {
                        let av = self.value(*a).data();
                        accumulate(&mut grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                    }
                }
                Op::Scale(x, f) => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * f).collect());
                }
                Op::Gelu(x) => {
                    let xs = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xs)
                        .map(|(gv, &v)| {
                            let u = GELU_C * (v + GELU_A * v * v * v);
                            let th = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                        })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let cols = y.cols();
                    let rows = y.rows();
                    let gm = self.value(*gamma).data();
                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut dg = vec![0.0; cols];
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                let gv = g[r * cols + c];
                                dg[c] += gv * xhat[r * cols + c];
                                db[c] += gv;
                            }
                        }
                        if self.needs(*gamma) {
                            accumulate(&mut grads, *gamma, dg);
                        }
                        if self.needs(*beta) {
                            accumulate(&mut grads, *beta, db);
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; rows * cols];
                        let inv_n = 1.0 / cols as f64;
                        for r in 0..rows {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for c in 0..cols {
                                let dh = g[r * cols + c] * gm[c];
                                mean_dh += dh;
                                mean_dh_h += dh * xhat[r * cols + c];
                            }
                            mean_dh *= inv_n;
                            mean_dh_h *= inv_n;
                            for c in 0..cols {
                                let dh = g[r * cols + c] * gm[c];
                                dx[r * cols + c] =
                                    rstd[r] * (dh - mean_dh - xhat[r * cols + c] * mean_dh_h);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Softmax { x, valid } => {
                    let cols = y.cols();
                    let ys = y.data();
                    let mut dx = vec![0.0; ys.len()];
                    for r in 0..y.rows() {
                        let yr = &ys[r * cols..r * cols + valid];
                        let gr = &g[r * cols..r * cols + valid];
                        let s = dot(yr, gr);
                        for c in 0..*valid {
                            dx[r * cols + c] = yr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmax(x) => {
                    let cols = y.cols();
                    let ys = y.data();
                    let mut dx = vec![0.0; ys.len()];
                    for r in 0..y.rows() {
                        let s: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                        for c in 0..cols {
                            let i = r * cols + c;
                            dx[i] = g[i] - ys[i].exp() * s;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSumExp(x) => {
                    let xt = self.value(*x);
                    let cols = xt.cols();
                    let mut dx = vec![0.0; xt.len()];
                    for r in 0..xt.rows() {
                        softmax_into(xt.row(r), &mut dx[r * cols..(r + 1) * cols]);
                        for v in &mut dx[r * cols..(r + 1) * cols] {
                            *v *= g[r];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Cols { x, start } => {
                    let (rows, cols) = self.dims(*x);
                    let len = y.cols();
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let rows = y.rows();
                    let total = y.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.dims(p).1;
                        if self.needs(p) {
                            let mut dp = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        offset += c;
                    }
                }
                Op::Rows { x, start } => {
                    let (rows, cols) = self.dims(*x);
                    let mut dx = vec![0.0; rows * cols];
                    dx[start * cols..start * cols + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.needs(p) {
                            accumulate(&mut grads, p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let (rows, cols) = self.dims(*table);
                    let mut dt = vec![0.0; rows * cols];
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[i * cols..(i + 1) * cols], &mut dt[id * cols..(id + 1) * cols]);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::FrameStack {
                    x,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (t_in, c) = self.dims(*x);
                    let width = kernel * c;
                    let mut dx = vec![0.0; t_in * c];
                    for j in 0..y.rows() {
                        for k in 0..*kernel {
                            let src = (j * stride + k) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t_in {
                                let s = src as usize;
                                axpy(
                                    1.0,
                                    &g[j * width + k * c..j * width + (k + 1) * c],
                                    &mut dx[s * c..(s + 1) * c],
                                );
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskRows { x, valid } => {
                    let cols = y.cols();
                    let mut dx = g;
                    if *valid < y.rows() {
                        dx[valid * cols..].iter_mut().for_each(|v| *v = 0.0);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::DepthwiseConv { x, w } => {
                    let (t, c) = self.dims(*x);
                    let k = self.dims(*w).0;
                    let pad = k / 2;
                    let xs = self.value(*x).data();
                    let ws = self.value(*w).data();
                    let mut dx = vec![0.0; t * c];
                    let mut dw = vec![0.0; k * c];
                    for row in 0..t {
                        for kk in 0..k {
                            let src = (row + kk) as isize - pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let s = src as usize;
                            for ch in 0..c {
                                let gv = g[row * c + ch];
                                dx[s * c + ch] += gv * ws[kk * c + ch];
                                dw[kk * c + ch] += gv * xs[s * c + ch];
                            }
                        }
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let dins = op.backward(&ins, y, &g);
                    for (&v, d) in inputs.iter().zip(dins) {
                        if let Some(d) = d {
                            if self.needs(v) {
                                accumulate(&mut grads, v, d);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => axpy(1.0, &d, existing),
        slot @ None => *slot = Some(d),
    }
}
