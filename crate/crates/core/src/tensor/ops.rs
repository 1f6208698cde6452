use super::graph::{Graph, Var};
use super::{dim_err, Result, Scalar, Tensor, TensorError};

/// How per-position losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

pub(crate) enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    ScaleBy { x: Var, s: Var },
    Affine { x: Var, mul: S },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Clamp { x: Var, lo: S, hi: S },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LogSoftmaxRows(Var),
    CausalSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<S>, probs: Vec<S> },
    Reparam { mu: Var, logvar: Var, noise: Vec<S> },
}

impl<S> Op<S> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddRow { x, bias } => vec![*x, *bias],
            ScaleBy { x, s } => vec![*x, *s],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Gather { table, .. } => vec![*table],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
            Reparam { mu, logvar, .. } => vec![*mu, *logvar],
            Transpose(x) | Exp(x) | Log(x) | Tanh(x) | Sigmoid(x) | Gelu(x) | Relu(x)
            | LogSoftmaxRows(x) | CausalSoftmax(x) | Reshape(x) | Sum(x) | Mean(x) => vec![*x],
            Affine { x, .. } | Clamp { x, .. } | Softmax { x, .. } | Pick { x, .. } => vec![*x],
            SliceRows { x, .. } | SliceCols { x, .. } => vec![*x],
        }
    }
}

fn matrix_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => dim_err(op, format!("expected a matrix, got shape {shape:?}")),
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o = *o + av * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<S: Scalar> Graph<S> {
    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<S>, name: &'static str, f: impl Fn(S) -> S) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, op, name)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<S>, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, op, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.shape(a), "matmul")?;
        let (k2, n) = matrix_dims(self.shape(b), "matmul")?;
        if k != k2 {
            return dim_err("matmul", format!("inner extents {k} and {k2}"));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b: false }, "matmul")
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.shape(a), "matmul_t")?;
        let (n, k2) = matrix_dims(self.shape(b), "matmul_t")?;
        if k != k2 {
            return dim_err("matmul_t", format!("inner extents {k} and {k2}"));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b: true }, "matmul_t")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.shape(x), "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(x), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a row vector (`[n]` or `[1×n]`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).as_matrix();
        if self.value(bias).len() != n {
            return dim_err("add_row", format!("bias of {} for {n} columns", self.value(bias).len()));
        }
        let b = self.value(bias).data();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(src[i * n..(i + 1) * n].iter().zip(b).map(|(&v, &bv)| v + bv));
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::AddRow { x, bias }, "add_row")
    }

    /// Multiplies every entry of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return dim_err("scale_by", format!("scale has shape {:?}", self.shape(s)));
        }
        let factor = self.scalar(s);
        self.unary(x, Op::ScaleBy { x, s }, "scale_by", |v| v * factor)
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        self.affine(x, factor, S::zero())
    }

    /// `x * mul + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: S, add: S) -> Result<Var> {
        self.unary(x, Op::Affine { x, mul }, "affine", |v| v * mul + add)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -S::one())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), "exp", |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), "log", |v| v.ln())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), "tanh", |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a, half) = (S::lit(GELU_C), S::lit(GELU_A), S::lit(0.5));
        self.unary(x, Op::Gelu(x), "gelu", move |v| {
            half * v * (S::one() + (c * (v + a * v * v * v)).tanh())
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), "relu", |v| v.max(S::zero()))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Elementwise clamp; the gradient passes through inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        self.unary(x, Op::Clamp { x, lo, hi }, "clamp", move |v| v.max(lo).min(hi))
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err("softmax", format!("axis {axis} for rank {}", shape.len()));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let mut max = src[at(0)];
                for i in 1..n {
                    max = max.max(src[at(i)]);
                }
                let mut total = S::zero();
                for i in 0..n {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total = total + e;
                }
                for i in 0..n {
                    out[at(i)] = out[at(i)] / total;
                }
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, outer, n, inner }, "softmax")
    }

    /// Row softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.shape(x), "causal_softmax")?;
        if m != n {
            return dim_err("causal_softmax", format!("needs a square matrix, got {m}×{n}"));
        }
        let src = self.value(x).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..i * n + i + 1];
            let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let mut total = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * n + j] = e;
                total = total + e;
            }
            for o in &mut out[i * n..i * n + i + 1] {
                *o = *o / total;
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::CausalSoftmax(x), "causal_softmax")
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).as_matrix();
        let src = self.value(x).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmaxRows(x), "log_softmax")
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// the elementwise `gamma` scale and `beta` shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (m, n) = self.value(x).as_matrix();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return dim_err("layer_norm", format!("affine parameters must have {n} entries"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let count = S::from_usize(n).unwrap();
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() / count;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / count;
            let r = S::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            "layer_norm",
        )
    }

    /// Row gather from a `[V×D]` table; repeated ids accumulate on backward.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = matrix_dims(self.shape(table), "gather_rows")?;
        if ids.is_empty() {
            return dim_err("gather_rows", "no ids");
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { op: "gather_rows", index: id, extent: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        self.push(t, Op::Gather { table, ids: ids.to_vec() }, "gather_rows")
    }

    /// Picks `x[row, col]` for each pair, returning a vector.
    pub fn pick(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.value(x).as_matrix();
        if coords.is_empty() {
            return dim_err("pick", "no coordinates");
        }
        let mut idx = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m {
                return Err(TensorError::Index { op: "pick", index: r, extent: m });
            }
            if c >= n {
                return Err(TensorError::Index { op: "pick", index: c, extent: n });
            }
            idx.push(r * n + c);
        }
        let src = self.value(x).data();
        let out: Vec<S> = idx.iter().map(|&i| src[i]).collect();
        self.push(Tensor::from_parts(vec![idx.len()], out), Op::Pick { x, idx }, "pick")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_rows", "nothing to concatenate");
        };
        let (_, n) = matrix_dims(self.shape(first), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = matrix_dims(self.shape(p), "concat_rows")?;
            if c != n {
                return dim_err("concat_rows", format!("column counts {n} and {c}"));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::from_parts(vec![rows, n], out), Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_cols", "nothing to concatenate");
        };
        let (m, _) = matrix_dims(self.shape(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims(self.shape(p), "concat_cols")?;
            if r != m {
                return dim_err("concat_cols", format!("row counts {m} and {r}"));
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
        self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix_dims(self.shape(x), "slice_rows")?;
        if len == 0 || start + len > m {
            return dim_err("slice_rows", format!("rows {start}..{} of {m}", start + len));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.push(Tensor::from_parts(vec![len, n], out), Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix_dims(self.shape(x), "slice_cols")?;
        if len == 0 || start + len > n {
            return dim_err("slice_cols", format!("cols {start}..{} of {n}", start + len));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let total: S = t.data().iter().copied().sum();
        let m = total / S::from_usize(t.len()).unwrap();
        self.push(Tensor::scalar(m), Op::Mean(x), "mean")
    }

    /// Negative log-softmax likelihood of `targets` under row-wise `logits`,
    /// over the positions where `mask` is set.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<Var> {
        let (t, v) = matrix_dims(self.shape(logits), "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return dim_err(
                "cross_entropy",
                format!("{t} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            );
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(id, _)| id).find(|&&id| id >= v) {
            return Err(TensorError::Index { op: "cross_entropy", index: bad, extent: v });
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(TensorError::Contract("cross_entropy: mask selects no positions".into()));
        }
        let w = match reduction {
            Reduction::Mean => S::one() / S::from_usize(active).unwrap(),
            Reduction::Sum => S::one(),
        };
        let src = self.value(logits).data();
        let mut weights = vec![S::zero(); t];
        let mut probs = vec![S::zero(); t * v];
        let mut loss = S::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            weights[i] = w;
            let row = &src[i * v..(i + 1) * v];
            let lse = log_sum_exp(row);
            loss = loss + w * (lse - row[targets[i]]);
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs },
            "cross_entropy",
        )
    }

    /// `mu + exp(logvar / 2) ⊙ noise`; the noise is a constant.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, noise: &[S]) -> Result<Var> {
        self.same_shape(mu, logvar, "reparameterize")?;
        if self.value(mu).len() != noise.len() {
            return dim_err(
                "reparameterize",
                format!("latent size {} but {} noise values", self.value(mu).len(), noise.len()),
            );
        }
        let half = S::lit(0.5);
        let out = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .zip(noise)
            .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
            .collect();
        let shape = self.shape(mu).to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Reparam { mu, logvar, noise: noise.to_vec() },
            "reparameterize",
        )
    }

    pub(crate) fn backprop_node(&mut self, idx: usize, g: &[S]) -> Result<()> {
        // Detach the op so input values can be read while gradients are written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        self.backprop_op(idx, &op, g);
        self.nodes[idx].op = op;
        Ok(())
    }

    fn backprop_op(&mut self, idx: usize, op: &Op<S>, g: &[S]) {
        let out = self.nodes[idx].value.clone();
        let y = out.data();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).as_matrix();
                let n = y.len() / m;
                if self.needs(*a) {
                    let mut da = vec![S::zero(); m * k];
                    if *trans_b {
                        gemm_nn(g, self.value(*b).data(), &mut da, m, n, k);
                    } else {
                        gemm_nt(g, self.value(*b).data(), &mut da, m, n, k);
                    }
                    self.accumulate(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); k * n];
                    if *trans_b {
                        // b is n×k: db = gᵀ · a
                        gemm_tn(g, self.value(*a).data(), &mut db, m, n, k);
                    } else {
                        gemm_tn(self.value(*a).data(), g, &mut db, m, k, n);
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).as_matrix();
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let da: Vec<S> = g.iter().zip(self.value(*b).data()).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<S> = g.iter().zip(self.value(*a).data()).map(|(&gv, &av)| gv * av).collect();
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::AddRow { x, bias } => {
                let n = self.value(*bias).len();
                let mut db = vec![S::zero(); n];
                for row in g.chunks(n) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d = *d + gv;
                    }
                }
                self.accumulate(*x, g.to_vec());
                self.accumulate(*bias, db);
            }
            Op::ScaleBy { x, s } => {
                let factor = self.scalar(*s);
                let ds: S = g.iter().zip(self.value(*x).data()).map(|(&gv, &xv)| gv * xv).sum();
                self.accumulate(*x, g.iter().map(|&gv| gv * factor).collect());
                self.accumulate(*s, vec![ds]);
            }
            Op::Affine { x, mul } => {
                self.accumulate(*x, g.iter().map(|&gv| gv * *mul).collect());
            }
            Op::Exp(x) => {
                self.accumulate(*x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
            }
            Op::Log(x) => {
                let dx = g.iter().zip(self.value(*x).data()).map(|(&gv, &xv)| gv / xv).collect();
                self.accumulate(*x, dx);
            }
            Op::Tanh(x) => {
                let dx = g.iter().zip(y).map(|(&gv, &yv)| gv * (S::one() - yv * yv)).collect();
                self.accumulate(*x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (S::one() - yv)).collect();
                self.accumulate(*x, dx);
            }
            Op::Gelu(x) => {
                let (c, a, half) = (S::lit(GELU_C), S::lit(GELU_A), S::lit(0.5));
                let three = S::lit(3.0);
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &v)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d = half * (S::one() + t)
                            + half * v * (S::one() - t * t) * c * (S::one() + three * a * v * v);
                        gv * d
                    })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &v)| if v >= *lo && v <= *hi { gv } else { S::zero() })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Softmax { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let mut dx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * n * inner + i * inner + j;
                        let dot: S = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::CausalSoftmax(x) => {
                let (m, n) = out.as_matrix();
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let r = i * n..i * n + i + 1;
                    let dot: S = g[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum();
                    for k in r {
                        dx[k] = y[k] * (g[k] - dot);
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let (m, n) = out.as_matrix();
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let gsum: S = g[r.clone()].iter().copied().sum();
                    for k in r {
                        dx[k] = g[k] - y[k].exp() * gsum;
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).len();
                let m = rstd.len();
                let gam = self.value(*gamma).data().to_vec();
                let count = S::from_usize(n).unwrap();
                let mut dgamma = vec![S::zero(); n];
                let mut dbeta = vec![S::zero(); n];
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut sum_dh = S::zero();
                    let mut sum_dh_h = S::zero();
                    for j in 0..n {
                        dgamma[j] = dgamma[j] + gr[j] * hr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        let dh = gr[j] * gam[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hr[j];
                    }
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        dx[i * n + j] = rstd[i] / count * (count * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let (v, d) = self.value(*table).as_matrix();
                    let mut dt = vec![S::zero(); v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, &b) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *a = *a + b;
                        }
                    }
                    self.accumulate(*table, dt);
                }
            }
            Op::Pick { x, idx } => {
                let mut dx = vec![S::zero(); self.value(*x).len()];
                for (&i, &gv) in idx.iter().zip(g) {
                    dx[i] = dx[i] + gv;
                }
                self.accumulate(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.as_matrix();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).as_matrix().1;
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * n + col..i * n + col + w]);
                        }
                        self.accumulate(p, dp);
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.value(*x).as_matrix();
                let mut dx = vec![S::zero(); m * n];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                self.accumulate(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).as_matrix();
                let w = g.len() / m;
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accumulate(*x, dx);
            }
            Op::Reshape(x) => self.accumulate(*x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![g[0] / S::from_usize(n).unwrap(); n]);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let v = self.value(*logits).as_matrix().1;
                let mut dx = vec![S::zero(); probs.len()];
                for (i, &w) in weights.iter().enumerate() {
                    if w == S::zero() {
                        continue;
                    }
                    let scale = g[0] * w;
                    for k in 0..v {
                        dx[i * v + k] = scale * probs[i * v + k];
                    }
                    dx[i * v + targets[i]] = dx[i * v + targets[i]] - scale;
                }
                self.accumulate(*logits, dx);
            }
            Op::Reparam { mu, logvar, noise } => {
                let half = S::lit(0.5);
                let dlv = g
                    .iter()
                    .zip(self.value(*logvar).data())
                    .zip(noise)
                    .map(|((&gv, &lv), &e)| gv * e * half * (half * lv).exp())
                    .collect();
                self.accumulate(*mu, g.to_vec());
                self.accumulate(*logvar, dlv);
            }
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln()
}
