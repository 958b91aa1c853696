//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records primitive operations in execution order. Leaves are
//! copied in from [`Tensor`]s; after [`Graph::backward`] their adjoints can be
//! read with [`Graph::grad`] and pushed back into the source tensors.

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Ewise(EwiseKind, Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    AddRow(Var, Var),
    Act(Activation, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse { pred: Var, target: Vec<f64> },
    FrobSq(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Accumulated adjoint for leaves; survives across `backward` calls.
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf whose `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("graph nodes hold valid shapes")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat_dims(a, "matmul")?;
        let (k2, m) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a), self.value(b), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(a, "transpose")?;
        let out = transpose_raw(self.value(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    pub fn ewise(&mut self, a: Var, b: Var, kind: EwiseKind) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("ewise", self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<f64> = match kind {
            EwiseKind::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            EwiseKind::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            EwiseKind::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Ewise(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(a, b, EwiseKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(a, b, EwiseKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(a, b, EwiseKind::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    /// `1 − a`, element-wise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| 1.0 - x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::OneMinus(a), rg)
    }

    /// Adds a length-`m` row vector to every row of an `n×m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.mat_dims(x, "add_row")?;
        if self.shape(row) != [m] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(m)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(vec![n, m], out, Op::AddRow(x, row), rg))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Relu => self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
            Activation::Tanh => self.value(a).iter().map(|x| x.tanh()).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Act(kind, a), rg)
    }

    /// Mean cross-entropy of `logits[B×C]` against class indices.
    pub fn loss_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.mat_dims(logits, "loss_ce")?;
        if labels.len() != b {
            return Err(Error::Input(format!(
                "loss_ce: {} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("loss_ce: label {bad} outside [0, {c})")));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let log_norm = mx + sum_exp.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - log_norm).exp();
            }
            total += log_norm - row[labels[i]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![total / b as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error; `pred` may be `[B]` or `[B×1]`.
    pub fn loss_mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::Input(format!(
                "loss_mse: {} predictions vs {} targets",
                p.len(),
                target.len()
            )));
        }
        let mse = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            Vec::new(),
            vec![mse],
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Squared Frobenius norm.
    pub fn frob_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::FrobSq(a), rg)
    }

    /// Propagates d(loss)/d(node) back to every gradient-requiring leaf.
    /// Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Input(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let node = &self.nodes[idx];
            let send = |adj: &mut Vec<Option<Vec<f64>>>, v: Var, contrib: Vec<f64>| {
                match &mut adj[v.0] {
                    Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    let n = &mut self.nodes[idx];
                    match &mut n.grad {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, c)| *b += c),
                        slot => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let m = self.nodes[b.0].shape[1];
                    if self.rg(*a) {
                        let bt = transpose_raw(&self.nodes[b.0].value, k, m);
                        send(&mut adj, *a, matmul_raw(&g, &bt, n, m, k));
                    }
                    if self.rg(*b) {
                        let at = transpose_raw(&self.nodes[a.0].value, n, k);
                        send(&mut adj, *b, matmul_raw(&at, &g, k, n, m));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    send(&mut adj, *a, transpose_raw(&g, r, c));
                }
                Op::Ewise(kind, a, b) => {
                    let (a, b) = (*a, *b);
                    match kind {
                        EwiseKind::Add => {
                            if self.rg(a) {
                                send(&mut adj, a, g.clone());
                            }
                            if self.rg(b) {
                                send(&mut adj, b, g);
                            }
                        }
                        EwiseKind::Sub => {
                            if self.rg(a) {
                                send(&mut adj, a, g.clone());
                            }
                            if self.rg(b) {
                                send(&mut adj, b, g.iter().map(|x| -x).collect());
                            }
                        }
                        EwiseKind::Mul => {
                            if self.rg(a) {
                                let bv = &self.nodes[b.0].value;
                                send(&mut adj, a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                            }
                            if self.rg(b) {
                                let av = &self.nodes[a.0].value;
                                send(&mut adj, b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    send(&mut adj, *a, g.iter().map(|x| x * c).collect());
                }
                Op::OneMinus(a) => {
                    send(&mut adj, *a, g.iter().map(|x| -x).collect());
                }
                Op::AddRow(x, row) => {
                    let m = node.shape[1];
                    if self.rg(*row) {
                        let mut rg = vec![0.0; m];
                        for chunk in g.chunks(m) {
                            rg.iter_mut().zip(chunk).for_each(|(r, c)| *r += c);
                        }
                        send(&mut adj, *row, rg);
                    }
                    if self.rg(*x) {
                        send(&mut adj, *x, g);
                    }
                }
                Op::Act(kind, a) => {
                    let contrib = match kind {
                        Activation::Relu => {
                            let input = &self.nodes[a.0].value;
                            g.iter()
                                .zip(input)
                                .map(|(gx, &x)| if x > 0.0 { *gx } else { 0.0 })
                                .collect()
                        }
                        Activation::Tanh => g
                            .iter()
                            .zip(&node.value)
                            .map(|(gx, y)| gx * (1.0 - y * y))
                            .collect(),
                    };
                    send(&mut adj, *a, contrib);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut contrib: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        contrib[i * c + l] -= scale;
                    }
                    send(&mut adj, *logits, contrib);
                }
                Op::Mse { pred, target } => {
                    let p = &self.nodes[pred.0].value;
                    let scale = 2.0 * g[0] / p.len() as f64;
                    let contrib = p.iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
                    send(&mut adj, *pred, contrib);
                }
                Op::FrobSq(a) => {
                    let av = &self.nodes[a.0].value;
                    let s = 2.0 * g[0];
                    send(&mut adj, *a, av.iter().map(|x| s * x).collect());
                }
            }
        }
        for n in &self.nodes {
            if let Some(gr) = &n.grad {
                if gr.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric("non-finite gradient in backward".into()));
                }
            }
        }
        Ok(())
    }
}
