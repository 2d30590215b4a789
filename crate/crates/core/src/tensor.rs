//! Dense tensors and a reverse-mode automatic differentiation tape.
//!
//! A [`Graph`] records one forward pass: every operation appends a node holding
//! its output [`Tensor`] and the ids of its inputs, so node order is already a
//! topological order. [`Graph::backward`] walks the nodes in exact reverse
//! order and accumulates gradients additively, which makes it deterministic.
//! The tape is rebuilt for every forward pass.

use crate::error::{LoraeError, Result};
use crate::linalg::{gemm_raw, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(LoraeError::contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(LoraeError::dim("Tensor::new", &shape, &[values.len()]));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_matrix(m: Matrix) -> Self {
        let shape = vec![m.rows(), m.cols()];
        Tensor {
            shape,
            values: m.into_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    /// Mark this tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    /// View a 2-D tensor as a matrix (copies the values).
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Matrix::new(*r, *c, self.values.clone()),
            [n] => Matrix::new(1, *n, self.values.clone()),
            s => Err(LoraeError::dim("to_matrix", s, &[0, 0])),
        }
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Matrix::new(*r, *c, self.values),
            [n] => Matrix::new(1, *n, self.values),
            s => Err(LoraeError::dim("into_matrix", s, &[0, 0])),
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(LoraeError::dim(op, s, &[0, 0])),
        }
    }
}

/// Handle to a node of a [`Graph`].
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
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Relu(Var),
    Tanh(Var),
    Mse {
        a: Var,
        b: Var,
    },
    Sum(Var),
    Scale(Var, f64),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, mut value: Tensor, needs_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = needs_grad;
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Add an input tensor. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let (m, k) = ta.dims2("matmul")?;
        let (br, bc) = tb.dims2("matmul")?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(LoraeError::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_raw(m, k, n, &ta.values, k, false, &tb.values, bc, trans_b, &mut out, 0.0);
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, trans_b }, t, needs))
    }

    /// Row-broadcast bias add: `a: m×n`, `bias: n`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(bias);
        let (m, n) = ta.dims2("add_bias")?;
        if tb.numel() != n {
            return Err(LoraeError::dim("add_bias", ta.shape(), tb.shape()));
        }
        let mut out = ta.values.clone();
        for row in out.chunks_exact_mut(n) {
            for (x, b) in row.iter_mut().zip(&tb.values) {
                *x += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::AddBias { a, bias }, t, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape != tb.shape {
            return Err(LoraeError::dim("add", ta.shape(), tb.shape()));
        }
        let out = ta.values.iter().zip(&tb.values).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape.clone(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, t, needs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.values.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(ta.shape.clone(), out).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::Relu(a), t, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.values.iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(ta.shape.clone(), out).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::Tanh(a), t, needs)
    }

    /// Sum of squared differences `Σ (a − b)²` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape != tb.shape {
            return Err(LoraeError::dim("mse", ta.shape(), tb.shape()));
        }
        let s: f64 = ta.values.iter().zip(&tb.values).map(|(x, y)| (x - y) * (x - y)).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mse { a, b }, Tensor::scalar(s), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values.iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = ta.values.iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape.clone(), out).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), t, needs)
    }

    /// Mean softmax cross-entropy of `logits: B×C` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = tl.dims2("softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(LoraeError::dim("softmax_cross_entropy", tl.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(LoraeError::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, (row, p)) in tl.values.chunks_exact(c).zip(probs.chunks_exact_mut(c)).enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|pj| *pj /= z);
            loss -= row[labels[i]] - max - z.ln();
        }
        loss /= b as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Populates the gradient of every node that requires one; gradients from
    /// several consumers of the same node are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(LoraeError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.needs_grad {
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; node.value.numel()]));
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = ta.dims2("matmul")?;
                let (br, bc) = tb.dims2("matmul")?;
                let n = node.value.shape[1];
                if self.needs(*a) {
                    // dA = G · op(B)ᵀ
                    let buf = slot(grads, *a, m * k);
                    gemm_raw(m, n, k, g, n, false, &tb.values, bc, !trans_b, buf, 1.0);
                }
                if self.needs(*b) {
                    let buf = slot(grads, *b, br * bc);
                    if *trans_b {
                        // B is n×k: dB = Gᵀ · A
                        gemm_raw(n, m, k, g, n, true, &ta.values, k, false, buf, 1.0);
                    } else {
                        // B is k×n: dB = Aᵀ · G
                        gemm_raw(k, m, n, &ta.values, k, true, g, n, false, buf, 1.0);
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if self.needs(*a) {
                    accumulate(slot(grads, *a, g.len()), g);
                }
                if self.needs(*bias) {
                    let n = self.value(*bias).numel();
                    let buf = slot(grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        accumulate(buf, row);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Relu(a) => {
                let x = &self.value(*a).values;
                let buf = slot(grads, *a, x.len());
                for ((d, &gi), &xi) in buf.iter_mut().zip(g).zip(x) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Tanh(a) => {
                let y = &node.value.values;
                let buf = slot(grads, *a, y.len());
                for ((d, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            Op::Mse { a, b } => {
                let xa = &self.value(*a).values;
                let xb = &self.value(*b).values;
                let g0 = g[0];
                if self.needs(*a) {
                    let buf = slot(grads, *a, xa.len());
                    for ((d, x), y) in buf.iter_mut().zip(xa).zip(xb) {
                        *d += 2.0 * (x - y) * g0;
                    }
                }
                if self.needs(*b) {
                    let buf = slot(grads, *b, xb.len());
                    for ((d, x), y) in buf.iter_mut().zip(xa).zip(xb) {
                        *d -= 2.0 * (x - y) * g0;
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                slot(grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Scale(a, c) => {
                let buf = slot(grads, *a, g.len());
                for (d, gi) in buf.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).shape[1];
                let scale = g[0] / labels.len() as f64;
                let buf = slot(grads, *logits, probs.len());
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        buf[i * c + j] += scale * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
