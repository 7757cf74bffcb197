//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value; nodes are
//! therefore stored in topological order and `backward` is a single reverse
//! sweep that visits each node at most once.

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::{Real, Tensor};
use crate::bandstop;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    AddConst(Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Reciprocal(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Reshape(Var),
    Matmul(Var, Var),
    NodeMix(Var, Var),
    ConcatLast(Vec<Var>),
    AddBias(Var, Var),
    MeanNodes(Var),
    BandStop { input: Var, threshold: T, sigma: T },
    SoftHistogram {
        inputs: Vec<Var>,
        centers: Vec<T>,
        widths: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Trainable leaf: its gradient is retained after `backward`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, masks, target distributions).
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Gradient of the last `backward` loss w.r.t. a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Like [`Tape::grad`], with unreached nodes reported as zero.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.node(v).value.len()])
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(shape, value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), ng))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("hadamard", self.shape(a), self.shape(b))?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.shape(a).to_vec(), value, Op::Hadamard(a, b), ng))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// Multiplication by a one-element tensor (the only broadcast the engine allows).
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension {
                op: "mul_scalar",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s)[0];
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.node(a).needs_grad || self.node(s).needs_grad;
        Ok(self.push(self.shape(a).to_vec(), value, Op::MulScalar(a, s), ng))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), T::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), T::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        self.unary(a, Op::Reciprocal(a), T::recip)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), T::abs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.node(a).needs_grad;
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        let ng = self.node(a).needs_grad;
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), ng))
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), ng))
    }

    /// Applies a node-mixing matrix `adj[n×n]` to every sample of `x[batch×n×s]`:
    /// `out[b] = adj · x[b]`.
    pub fn node_mix(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(adj), self.shape(x));
        if sa.len() != 2 || sa[0] != sa[1] || sx.len() != 3 || sx[1] != sa[0] {
            return Err(Error::Dimension {
                op: "node_mix",
                lhs: sa.to_vec(),
                rhs: sx.to_vec(),
            });
        }
        let (batch, n, s) = (sx[0], sx[1], sx[2]);
        let mut out = vec![T::zero(); batch * n * s];
        let (av, xv) = (self.value(adj), self.value(x));
        for b in 0..batch {
            let off = b * n * s;
            gemm(av, &xv[off..off + n * s], &mut out[off..off + n * s], n, n, s);
        }
        let ng = self.node(adj).needs_grad || self.node(x).needs_grad;
        Ok(self.push(sx.to_vec(), out, Op::NodeMix(adj, x), ng))
    }

    /// Concatenates tensors that agree on all but the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::Dimension {
                    op: "concat_last",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.node(p).needs_grad);
        Ok(self.push(shape, out, Op::ConcatLast(parts.to_vec()), ng))
    }

    /// Adds `bias[d]` to every row of `x[..×d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let d = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != d {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        let ng = self.node(x).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(sx.to_vec(), out, Op::AddBias(x, bias), ng))
    }

    /// Mean over the node axis: `[batch×n×f] → [batch×f]`.
    pub fn mean_nodes(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 {
            return Err(Error::Dimension {
                op: "mean_nodes",
                lhs: sx.to_vec(),
                rhs: vec![],
            });
        }
        let (batch, n, f) = (sx[0], sx[1], sx[2]);
        let inv = T::one() / T::of(n as f64);
        let xv = self.value(x);
        let mut out = vec![T::zero(); batch * f];
        for b in 0..batch {
            let o = &mut out[b * f..(b + 1) * f];
            for i in 0..n {
                let row = &xv[(b * n + i) * f..(b * n + i + 1) * f];
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        let ng = self.node(x).needs_grad;
        Ok(self.push(vec![batch, f], out, Op::MeanNodes(x), ng))
    }

    /// Entrywise band-stop gate ψ_{a,σ}.
    pub fn band_stop(&mut self, x: Var, threshold: T, sigma: T) -> Var {
        let op = Op::BandStop {
            input: x,
            threshold,
            sigma,
        };
        self.unary(x, op, |w| bandstop::psi(w, threshold, sigma))
    }

    /// Unnormalized soft histogram of every entry of `inputs` over the bin
    /// `centers` with kernel `widths`: `out[k] = Σ_i exp(-(w_i - q_k)² / β_k²)`.
    pub fn soft_histogram(&mut self, inputs: &[Var], centers: &[T], widths: &[T]) -> Result<Var> {
        if centers.len() != widths.len() || centers.is_empty() {
            return Err(Error::Dimension {
                op: "soft_histogram",
                lhs: vec![centers.len()],
                rhs: vec![widths.len()],
            });
        }
        let k = centers.len();
        let inv_b2: Vec<T> = widths.iter().map(|&b| T::one() / (b * b)).collect();
        let mut out = vec![T::zero(); k];
        for &v in inputs {
            for &w in self.value(v) {
                for ((o, &q), &ib) in out.iter_mut().zip(centers).zip(&inv_b2) {
                    let d = w - q;
                    let arg = -(d * d) * ib;
                    if arg > T::EXP_UNDERFLOW {
                        *o = *o + arg.exp();
                    }
                }
            }
        }
        let ng = inputs.iter().any(|&p| self.node(p).needs_grad);
        let op = Op::SoftHistogram {
            inputs: inputs.to_vec(),
            centers: centers.to_vec(),
            widths: widths.to_vec(),
        };
        Ok(self.push(vec![k], out, op, ng))
    }

    /// Mean softmax cross-entropy of `logits[batch×classes]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: classes,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); batch * classes];
        let mut loss = T::zero();
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                *p = (x - max).exp();
                z = z + *p;
            }
            probs[b * classes..(b + 1) * classes]
                .iter_mut()
                .for_each(|p| *p = *p / z);
            loss = loss + (z.ln() + max - row[label]);
        }
        loss = loss / T::of(batch as f64);
        let ng = self.node(logits).needs_grad;
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, ng))
    }

    /// Populates gradients of `loss` w.r.t. every node that needs one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let want = |v: Var| nodes[v.0].needs_grad;
        let len = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b].into_iter().filter(|&&v| want(v)) {
                    accumulate(&mut grads[v.0], len(v), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, &gv)| *o = *o + gv)
                    });
                }
            }
            Op::Hadamard(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if want(v) {
                        let ov = &nodes[other.0].value;
                        accumulate(&mut grads[v.0], len(v), |buf| {
                            for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(ov) {
                                *o = *o + gv * y;
                            }
                        });
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &gv)| *o = *o + gv * c)
                });
            }
            Op::MulScalar(a, s) => {
                let c = nodes[s.0].value[0];
                if want(*a) {
                    accumulate(&mut grads[a.0], len(*a), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, &gv)| *o = *o + gv * c)
                    });
                }
                if want(*s) {
                    let dot: T = g.iter().zip(&nodes[a.0].value).map(|(&x, &y)| x * y).sum();
                    accumulate(&mut grads[s.0], 1, |buf| buf[0] = buf[0] + dot);
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &gv)| *o = *o + gv)
                });
            }
            Op::Neg(a) => {
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &gv)| *o = *o - gv)
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(y) {
                        *o = *o + gv * yv;
                    }
                });
            }
            Op::Ln(a) => {
                let x = &nodes[a.0].value;
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        *o = *o + gv / xv;
                    }
                });
            }
            Op::Square(a) => {
                let x = &nodes[a.0].value;
                let two = T::of(2.0);
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        *o = *o + gv * two * xv;
                    }
                });
            }
            Op::Reciprocal(a) => {
                let y = &node.value;
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(y) {
                        *o = *o - gv * yv * yv;
                    }
                });
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].value;
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *o = *o + gv;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let x = &nodes[a.0].value;
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *o = *o + gv;
                        } else if xv < T::zero() {
                            *o = *o - gv;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    buf.iter_mut().for_each(|o| *o = *o + gv)
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    let bv = &nodes[b.0].value;
                    accumulate(&mut grads[a.0], m * k, |buf| gemm_nt(g, bv, buf, m, k, n));
                }
                if want(*b) {
                    let av = &nodes[a.0].value;
                    accumulate(&mut grads[b.0], k * n, |buf| gemm_tn(av, g, buf, m, k, n));
                }
            }
            Op::NodeMix(adj, x) => {
                let sx = &nodes[x.0].shape;
                let (batch, n, s) = (sx[0], sx[1], sx[2]);
                if want(*adj) {
                    let xv = &nodes[x.0].value;
                    accumulate(&mut grads[adj.0], n * n, |buf| {
                        for b in 0..batch {
                            let off = b * n * s;
                            gemm_nt(&g[off..off + n * s], &xv[off..off + n * s], buf, n, n, s);
                        }
                    });
                }
                if want(*x) {
                    let av = &nodes[adj.0].value;
                    accumulate(&mut grads[x.0], batch * n * s, |buf| {
                        for b in 0..batch {
                            let off = b * n * s;
                            gemm_tn(av, &g[off..off + n * s], &mut buf[off..off + n * s], n, n, s);
                        }
                    });
                }
            }
            Op::ConcatLast(parts) => {
                let total = *node.shape.last().expect("concat output has rank >= 1");
                let rows = node.value.len() / total;
                let mut col = 0;
                for &p in parts {
                    let w = *nodes[p.0].shape.last().expect("rank >= 1");
                    if want(p) {
                        accumulate(&mut grads[p.0], rows * w, |buf| {
                            for r in 0..rows {
                                let src = &g[r * total + col..r * total + col + w];
                                for (o, &gv) in buf[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *o = *o + gv;
                                }
                            }
                        });
                    }
                    col += w;
                }
            }
            Op::AddBias(x, bias) => {
                if want(*x) {
                    accumulate(&mut grads[x.0], len(*x), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, &gv)| *o = *o + gv)
                    });
                }
                if want(*bias) {
                    let d = len(*bias);
                    accumulate(&mut grads[bias.0], d, |buf| {
                        for row in g.chunks(d) {
                            buf.iter_mut().zip(row).for_each(|(o, &gv)| *o = *o + gv);
                        }
                    });
                }
            }
            Op::MeanNodes(x) => {
                let sx = &nodes[x.0].shape;
                let (batch, n, f) = (sx[0], sx[1], sx[2]);
                let inv = T::one() / T::of(n as f64);
                accumulate(&mut grads[x.0], batch * n * f, |buf| {
                    for b in 0..batch {
                        let gb = &g[b * f..(b + 1) * f];
                        for i in 0..n {
                            let row = &mut buf[(b * n + i) * f..(b * n + i + 1) * f];
                            row.iter_mut().zip(gb).for_each(|(o, &gv)| *o = *o + gv * inv);
                        }
                    }
                });
            }
            Op::BandStop {
                input,
                threshold,
                sigma,
            } => {
                let (a, s) = (*threshold, *sigma);
                let x = &nodes[input.0].value;
                accumulate(&mut grads[input.0], len(*input), |buf| {
                    for ((o, &gv), &w) in buf.iter_mut().zip(g).zip(x) {
                        *o = *o + gv * bandstop::psi_derivative(w, a, s);
                    }
                });
            }
            Op::SoftHistogram {
                inputs,
                centers,
                widths,
            } => {
                let two = T::of(2.0);
                let inv_b2: Vec<T> = widths.iter().map(|&b| T::one() / (b * b)).collect();
                for &v in inputs.iter().filter(|&&v| want(v)) {
                    let x = &nodes[v.0].value;
                    accumulate(&mut grads[v.0], x.len(), |buf| {
                        for (o, &w) in buf.iter_mut().zip(x) {
                            let mut acc = T::zero();
                            for ((&gk, &q), &ib) in g.iter().zip(centers).zip(&inv_b2) {
                                let d = w - q;
                                let arg = -(d * d) * ib;
                                if arg > T::EXP_UNDERFLOW {
                                    acc = acc - gk * arg.exp() * two * d * ib;
                                }
                            }
                            *o = *o + acc;
                        }
                    });
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / T::of(batch as f64);
                accumulate(&mut grads[logits.0], probs.len(), |buf| {
                    for (b, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            let idx = b * classes + c;
                            buf[idx] = buf[idx] + scale * (probs[idx] - onehot);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(y), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(&t(&[2, 1], &[1.0, 1.0]));
        let y = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.shape(y), &[2, 1]);
        assert_eq!(tape.value(y), &[3.0, 7.0]);

        let z = tape.constant(&Tensor::zeros(&[3, 2]));
        let y = tape.matmul(z, b).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn hadamard_cases() {
        let mut tape = Tape::new();
        let a = tape.param(&t(&[2], &[1.0, 2.0]));
        let b = tape.constant(&t(&[2], &[3.0, 4.0]));
        let y = tape.hadamard(a, b).unwrap();
        assert_eq!(tape.value(y), &[3.0, 8.0]);

        let ones = tape.constant(&Tensor::ones(&[2]));
        let y = tape.hadamard(a, ones).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0]);

        let zeros = tape.constant(&Tensor::zeros(&[2]));
        let y = tape.hadamard(a, zeros).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0]);

        let c = tape.constant(&Tensor::zeros(&[3]));
        assert!(matches!(tape.hadamard(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.param(&Tensor::zeros(&[2, 5]));
        let l = tape.softmax_cross_entropy(uniform, &[0, 3]).unwrap();
        assert!((tape.scalar(l) - 5f64.ln()).abs() < 1e-14);

        let logits = tape.param(&t(&[1, 2], &[10.0, -10.0]));
        let l = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        // -log sigmoid(20) = ln(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        assert!((tape.scalar(l) - expected).abs() < 1e-15);
        assert!((tape.scalar(l) - 2.06e-9).abs() < 1e-11);

        let two = tape.param(&Tensor::zeros(&[1, 2]));
        let l = tape.softmax_cross_entropy(two, &[0]).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(two).unwrap(), &[-0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let l = tape.param(&Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[3]),
            Err(Error::Index { index: 3, bound: 3, .. })
        ));
    }

    #[test]
    fn backward_simple_rules() {
        let w = t(&[3], &[0.5, -1.5, 2.0]);
        let mut tape = Tape::new();
        let v = tape.param(&w);
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let v = tape.param(&w);
        let sq = tape.hadamard(v, v).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0, -3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let v = tape.param(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_branch_has_zero_adjoint() {
        let mut tape = Tape::new();
        let a = tape.param(&t(&[2], &[1.0, 2.0]));
        let b = tape.param(&t(&[2], &[3.0, 4.0]));
        let _unused = tape.exp(b);
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert!(tape.grad(b).is_none());
        assert_eq!(tape.grad_or_zeros(b), vec![0.0, 0.0]);
    }

    #[test]
    fn node_mix_two_node_hand_case() {
        // adj = [[1,2],[3,4]], one sample with signals [[1,0],[0,1]] (2 nodes, 2 channels)
        let mut tape = Tape::new();
        let adj = tape.param(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.constant(&t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.node_mix(adj, x).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_and_mean_nodes() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[1, 2, 1], &[1.0, 2.0]));
        let b = tape.constant(&t(&[1, 2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_last(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[1, 2, 3]);
        assert_eq!(tape.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let m = tape.mean_nodes(c).unwrap();
        assert_eq!(tape.value(m), &[1.5, 4.0, 5.0]);
    }
}
