//! A small reverse-mode autodiff tape over dense row-major `f64` matrices.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological order for backpropagation.

use std::sync::Arc;

use crate::losses;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    RmsNorm(Var),
    SoftmaxRows(Var),
    Gather(Var, Arc<[usize]>),
    ConcatRows(Vec<Var>),
    WeightedSum(Vec<(Var, f64)>),
    Bce(Var, Arc<[bool]>),
    Dice(Var, Arc<[bool]>),
    CrossEntropy(Var, Arc<[u32]>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const RMS_EPS: f64 = 1e-6;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output, indexed like the parameter list that fed
/// [`Tape::param`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable input identified by `index` in the caller's parameter list.
    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(index), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul {}x{} by {}x{}", x.rows, x.cols, y.rows, y.cols);
        let out = Tensor::new(x.rows, y.cols, matmul(&x.data, &y.data, x.rows, x.cols, y.cols));
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "matmul_nt {}x{} by ({}x{})ᵀ", x.rows, x.cols, y.rows, y.cols);
        let out = Tensor::new(x.rows, y.rows, matmul_nt(&x.data, &y.data, x.rows, x.cols, y.rows));
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMulNt(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.rows, x.cols, data);
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), g)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "add_row shape mismatch");
        let mut data = x.data.clone();
        for chunk in data.chunks_mut(x.cols) {
            for (v, b) in chunk.iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        let out = Tensor::new(x.rows, x.cols, data);
        let g = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow(a, row), g)
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "mul_row shape mismatch");
        let mut data = x.data.clone();
        for chunk in data.chunks_mut(x.cols) {
            for (v, s) in chunk.iter_mut().zip(&r.data) {
                *v *= s;
            }
        }
        let out = Tensor::new(x.rows, x.cols, data);
        let g = self.needs(a) || self.needs(row);
        self.push(out, Op::MulRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v * c).collect());
        let g = self.needs(a);
        self.push(out, Op::Scale(a, c), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v.tanh()).collect());
        let g = self.needs(a);
        self.push(out, Op::Tanh(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| sigmoid(v)).collect());
        let g = self.needs(a);
        self.push(out, Op::Sigmoid(a), g)
    }

    /// Per-row `x / sqrt(mean(x²) + ε)`.
    pub fn rms_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = x.data.clone();
        for row in data.chunks_mut(x.cols) {
            let r = rms(row);
            row.iter_mut().for_each(|v| *v /= r);
        }
        let out = Tensor::new(x.rows, x.cols, data);
        let g = self.needs(a);
        self.push(out, Op::RmsNorm(a), g)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked out for
    /// `j > i + (cols - rows)`.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows, x.cols);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let limit = if causal { (i + cols - rows.min(cols) + 1).min(cols) } else { cols };
            let src = &x.data[i * cols..i * cols + limit];
            let dst = &mut data[i * cols..i * cols + limit];
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let out = Tensor::new(rows, cols, data);
        let g = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), g)
    }

    /// `out.data[j] = a.data[index[j]]`, reshaped to `rows x cols`. Covers
    /// row selection, slicing, permutation and reshaping.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        let data = index.iter().map(|&i| x.data[i]).collect();
        let out = Tensor::new(rows, cols, data);
        let g = self.needs(a);
        self.push(out, Op::Gather(a, index), g)
    }

    /// Selects whole rows of `a`.
    pub fn rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let cols = self.value(a).cols;
        let index: Arc<[usize]> = rows.iter().flat_map(|&r| (r * cols)..(r + 1) * cols).collect();
        self.gather(a, index, rows.len(), cols)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let g = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), g)
    }

    /// `Σ c_i · x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let first = self.value(terms[0].0);
        let mut out = Tensor::zeros(first.rows, first.cols);
        for &(v, c) in terms {
            let t = self.value(v);
            assert_eq!((t.rows, t.cols), (out.rows, out.cols), "weighted_sum shape mismatch");
            for (o, x) in out.data.iter_mut().zip(&t.data) {
                *o += c * x;
            }
        }
        let g = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(out, Op::WeightedSum(terms.to_vec()), g)
    }

    pub fn bce(&mut self, p: Var, target: Arc<[bool]>) -> Var {
        let v = losses::bce(&self.value(p).data, &target);
        let g = self.needs(p);
        self.push(Tensor::scalar(v), Op::Bce(p, target), g)
    }

    pub fn dice(&mut self, p: Var, target: Arc<[bool]>) -> Var {
        let v = losses::dice(&self.value(p).data, &target);
        let g = self.needs(p);
        self.push(Tensor::scalar(v), Op::Dice(p, target), g)
    }

    /// Mean cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<[u32]>) -> Var {
        let x = self.value(logits);
        let v = losses::cross_entropy(&x.data, x.cols, &targets).expect("one logit row per target");
        let g = self.needs(logits);
        self.push(Tensor::scalar(v), Op::CrossEntropy(logits, targets), g)
    }

    /// Backpropagates from the scalar `out` and returns gradients for the
    /// first `n_params` parameter indices.
    pub fn backward(&self, out: Var, n_params: usize) -> ParamGrads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0; self.nodes[out.0].value.len()]);
        let mut params: Vec<Option<Vec<f64>>> = vec![None; n_params];
        for id in (0..=out.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(i) => accumulate(&mut params[*i], &dy),
                Op::MatMul(a, b) => {
                    let (x, w) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let g = matmul_nt(&dy, &w.data, y.rows, y.cols, w.rows);
                        accumulate(&mut grads[a.0], &g);
                    }
                    if self.needs(*b) {
                        let g = matmul_tn(&x.data, &dy, x.rows, x.cols, y.cols);
                        accumulate(&mut grads[b.0], &g);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (x, w) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let g = matmul(&dy, &w.data, y.rows, y.cols, w.cols);
                        accumulate(&mut grads[a.0], &g);
                    }
                    if self.needs(*b) {
                        let g = matmul_tn(&dy, &x.data, y.rows, y.cols, x.cols);
                        accumulate(&mut grads[b.0], &g);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.needs(*v) {
                            accumulate(&mut grads[v.0], &dy);
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &dy);
                    }
                    if self.needs(*r) {
                        let mut g = vec![0.0; y.cols];
                        for chunk in dy.chunks(y.cols) {
                            g.iter_mut().zip(chunk).for_each(|(s, d)| *s += d);
                        }
                        accumulate(&mut grads[r.0], &g);
                    }
                }
                Op::MulRow(a, r) => {
                    let (x, s) = (self.value(*a), self.value(*r));
                    if self.needs(*a) {
                        let mut g = dy.clone();
                        for chunk in g.chunks_mut(y.cols) {
                            chunk.iter_mut().zip(&s.data).for_each(|(d, s)| *d *= s);
                        }
                        accumulate(&mut grads[a.0], &g);
                    }
                    if self.needs(*r) {
                        let mut g = vec![0.0; y.cols];
                        for (dc, xc) in dy.chunks(y.cols).zip(x.data.chunks(y.cols)) {
                            for ((s, d), xv) in g.iter_mut().zip(dc).zip(xc) {
                                *s += d * xv;
                            }
                        }
                        accumulate(&mut grads[r.0], &g);
                    }
                }
                Op::Scale(a, c) => {
                    let g: Vec<f64> = dy.iter().map(|d| d * c).collect();
                    accumulate(&mut grads[a.0], &g);
                }
                Op::Tanh(a) => {
                    let g: Vec<f64> = dy.iter().zip(&y.data).map(|(d, t)| d * (1.0 - t * t)).collect();
                    accumulate(&mut grads[a.0], &g);
                }
                Op::Sigmoid(a) => {
                    let g: Vec<f64> = dy.iter().zip(&y.data).map(|(d, s)| d * s * (1.0 - s)).collect();
                    accumulate(&mut grads[a.0], &g);
                }
                Op::RmsNorm(a) => {
                    let x = self.value(*a);
                    let n = y.cols as f64;
                    let mut g = vec![0.0; dy.len()];
                    for ((gr, dr), (yr, xr)) in
                        g.chunks_mut(y.cols).zip(dy.chunks(y.cols)).zip(y.data.chunks(y.cols).zip(x.data.chunks(y.cols)))
                    {
                        let r = rms(xr);
                        let dot: f64 = dr.iter().zip(yr).map(|(d, v)| d * v).sum::<f64>() / n;
                        for ((gv, d), v) in gr.iter_mut().zip(dr).zip(yr) {
                            *gv = (d - v * dot) / r;
                        }
                    }
                    accumulate(&mut grads[a.0], &g);
                }
                Op::SoftmaxRows(x) => {
                    let mut g = vec![0.0; dy.len()];
                    for ((gr, dr), yr) in g.chunks_mut(y.cols).zip(dy.chunks(y.cols)).zip(y.data.chunks(y.cols)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, v)| d * v).sum();
                        for ((gv, d), v) in gr.iter_mut().zip(dr).zip(yr) {
                            *gv = v * (d - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], &g);
                }
                Op::Gather(a, index) => {
                    let mut g = vec![0.0; self.value(*a).len()];
                    for (&i, d) in index.iter().zip(&dy) {
                        g[i] += d;
                    }
                    accumulate(&mut grads[a.0], &g);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        if self.needs(*p) {
                            accumulate(&mut grads[p.0], &dy[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        if self.needs(v) {
                            let g: Vec<f64> = dy.iter().map(|d| d * c).collect();
                            accumulate(&mut grads[v.0], &g);
                        }
                    }
                }
                Op::Bce(p, target) => {
                    let g = losses::bce_grad(&self.value(*p).data, target);
                    accumulate(&mut grads[p.0], &scaled(g, dy[0]));
                }
                Op::Dice(p, target) => {
                    let g = losses::dice_grad(&self.value(*p).data, target);
                    accumulate(&mut grads[p.0], &scaled(g, dy[0]));
                }
                Op::CrossEntropy(logits, targets) => {
                    let x = self.value(*logits);
                    let g = losses::cross_entropy_grad(&x.data, x.cols, targets);
                    accumulate(&mut grads[logits.0], &scaled(g, dy[0]));
                }
            }
        }
        ParamGrads(params)
    }
}

fn scaled(mut g: Vec<f64>, c: f64) -> Vec<f64> {
    g.iter_mut().for_each(|v| *v *= c);
    g
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn rms(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + RMS_EPS).sqrt()
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (orow, arow) in out.chunks_mut(n).zip(a.chunks(k)) {
        for (&av, brow) in arow.iter().zip(b.chunks(n)) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for arow in a.chunks(k).take(m) {
        for brow in b.chunks(k).take(n) {
            out.push(dot(arow, brow));
        }
    }
    out
}

/// `a[m,k]ᵀ · b[m,n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for (arow, brow) in a.chunks(k).zip(b.chunks(n)).take(m) {
        for (&av, orow) in arow.iter().zip(out.chunks_mut(n)) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociation flags.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
