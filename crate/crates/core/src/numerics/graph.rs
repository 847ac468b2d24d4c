//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node whose inputs already
//! exist, so node order is a topological order and `backward` is a single reverse sweep.
//! Nodes whose inputs are all constant are stored value-only and never visited.

use std::rc::Rc;

use super::tensor::{gemm, softmax, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Epsilon floor applied inside the logarithms of [`Graph::kl_div`].
pub const KL_FLOOR: f64 = 1e-12;

/// Token groups for divided attention. A token listed in several groups receives the
/// mean of its per-group outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGroups {
    pub groups: Vec<Vec<usize>>,
    counts: Vec<usize>,
}

impl AttentionGroups {
    pub fn new(tokens: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut counts = vec![0usize; tokens];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::invalid("empty attention group"));
            }
            for &t in g {
                if t >= tokens {
                    return Err(Error::shape(format!(
                        "attention group references token {t} of {tokens}"
                    )));
                }
                counts[t] += 1;
            }
        }
        if let Some(t) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("token {t} belongs to no attention group")));
        }
        Ok(Self { groups, counts })
    }

    pub fn tokens(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    IndexRows { a: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { a: Var, rstd: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Rc<AttentionGroups>,
        heads: usize,
        scale: f64,
        probs: Vec<Vec<f64>>,
    },
    CrossEntropy { a: Var, label: usize, probs: Vec<f64> },
    Kl { p: Var, q: Var, pp: Vec<f64>, qq: Vec<f64> },
    Cosine { a: Var, b: Var, zero: bool },
    DivFloor { a: Var, b: Var, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Single-threaded; use one graph per worker.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    warnings: Vec<String>,
}

fn broadcast_pair(a: &[usize], b: &[usize]) -> Option<bool> {
    // Some(true): b repeats over a; Some(false): a repeats over b.
    fn strip(s: &[usize]) -> &[usize] {
        let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
        &s[first..]
    }
    if a == b {
        return Some(true);
    }
    let (sa, sb) = (strip(a), strip(b));
    if a.ends_with(sb) || sb.is_empty() {
        Some(true)
    } else if b.ends_with(sa) || sa.is_empty() {
        Some(false)
    } else {
        None
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, present after `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Conditions (such as a zero-norm cosine) that were resolved by convention.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node, one row-major
    /// `L×L` matrix per (group, head) pair in group-major order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let b_small = broadcast_pair(&sa, &sb).ok_or_else(|| {
            Error::shape(format!("{name}: shapes {sa:?} and {sb:?} do not broadcast"))
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out = if b_small {
            let p = vb.len();
            let data = va.iter().enumerate().map(|(i, x)| f(*x, vb[i % p])).collect();
            Tensor::new(sa, data)?
        } else {
            let p = va.len();
            let data = vb.iter().enumerate().map(|(i, y)| f(va[i % p], *y)).collect();
            Tensor::new(sb, data)?
        };
        Ok((out, b_small))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a / max(b, eps)` elementwise, with `b` optionally broadcast.
    pub fn div_floor(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "div: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (out, _) = self.binary(a, b, "div", |x, y| x / y.max(eps))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::DivFloor { a, b, eps }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x + c).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    // ---- linear algebra & layout ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x·w + bias` with the bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns), or rank-1
    /// tensors end to end.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let rank = self.shape(inputs[0]).len();
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| self.shape(*v).to_vec()).collect();
        if shapes.iter().any(|s| s.len() != rank) || rank > 2 || axis >= rank {
            return Err(Error::shape(format!("concat axis {axis} of shapes {shapes:?}")));
        }
        let out = if rank == 1 {
            let data = inputs.iter().flat_map(|v| self.value(*v).data().to_vec()).collect();
            Tensor::vector(data)
        } else if axis == 0 {
            let cols = shapes[0][1];
            if shapes.iter().any(|s| s[1] != cols) {
                return Err(Error::shape(format!("concat rows of shapes {shapes:?}")));
            }
            let rows = shapes.iter().map(|s| s[0]).sum();
            let data = inputs.iter().flat_map(|v| self.value(*v).data().to_vec()).collect();
            Tensor::matrix(rows, cols, data)?
        } else {
            let rows = shapes[0][0];
            if shapes.iter().any(|s| s[0] != rows) {
                return Err(Error::shape(format!("concat columns of shapes {shapes:?}")));
            }
            let cols: usize = shapes.iter().map(|s| s[1]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in inputs {
                    data.extend_from_slice(self.value(*v).row(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Gathers entries of the first dimension (rows of a matrix, elements of a vector).
    pub fn index_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n0 = shape[0];
        let row: usize = shape[1..].iter().product();
        if let Some(bad) = idx.iter().find(|&&i| i >= n0) {
            return Err(Error::shape(format!("index {bad} out of range for {shape:?}")));
        }
        if idx.is_empty() {
            return Err(Error::invalid("index_rows with no indices"));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::IndexRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over the leading axis of a matrix: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(Error::shape(format!("mean_rows of {:?}", v.shape())));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(a), rg))
    }

    // ---- activations ----

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut data = Vec::with_capacity(v.len());
        for r in 0..v.rows() {
            data.extend(softmax(&v.data()[r * c..(r + 1) * c]));
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis, without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut data = Vec::with_capacity(v.len());
        let mut rstd = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = &v.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            data.extend(row.iter().map(|x| (x - mean) * rs));
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { a, rstd }, rg)
    }

    /// Grouped multi-head self-attention over pre-projected `q`, `k`, `v` (`[N, D]`,
    /// `D` divisible by `heads`). Within each group every member attends to every member;
    /// `scale` multiplies the query-key dot products.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: Rc<AttentionGroups>,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::shape(format!(
                "attention q {:?} k {:?} v {:?}",
                shape,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("{d} features not divisible into {heads} heads")));
        }
        if groups.tokens() != n {
            return Err(Error::shape(format!(
                "attention groups cover {} tokens, input has {n}",
                groups.tokens()
            )));
        }
        let dh = d / heads;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(groups.groups.len() * heads);
        for members in &groups.groups {
            let l = members.len();
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; l * l];
                for (i, &ti) in members.iter().enumerate() {
                    let qi = &qd[ti * d + off..ti * d + off + dh];
                    let row = &mut p[i * l..(i + 1) * l];
                    for (j, &tj) in members.iter().enumerate() {
                        let kj = &kd[tj * d + off..tj * d + off + dh];
                        row[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let sm = softmax(row);
                    row.copy_from_slice(&sm);
                    let inv = 1.0 / groups.counts[ti] as f64;
                    for (j, &tj) in members.iter().enumerate() {
                        let w = row[j] * inv;
                        let vj = &vd[tj * d + off..tj * d + off + dh];
                        let o = &mut out[ti * d + off..ti * d + off + dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += w * vc;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let out = Tensor::matrix(n, d, out)?;
        let node = self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups: groups.clone(),
                heads,
                scale,
                probs: Vec::new(),
            },
            true,
        );
        // Probabilities are kept for inspection even on constant graphs.
        self.nodes[node.0].op = Op::Attention {
            q,
            k,
            v,
            groups,
            heads,
            scale,
            probs,
        };
        self.nodes[node.0].requires_grad = rg;
        Ok(node)
    }

    // ---- losses & similarity ----

    /// `-log softmax(logits)[label]` over all entries of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let v = self.value(logits).data();
        if label >= v.len() {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} logits",
                v.len()
            )));
        }
        let probs = softmax(v);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = (lse - v[label]).max(0.0);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                a: logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// `KL(softmax(p) ‖ softmax(q))` with logarithms floored at [`KL_FLOOR`].
    pub fn kl_div(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let (p, q) = (self.value(p_logits).data(), self.value(q_logits).data());
        if p.len() != q.len() {
            return Err(Error::shape(format!(
                "kl: {} vs {} logits",
                p.len(),
                q.len()
            )));
        }
        let pp = softmax(p);
        let qq = softmax(q);
        let kl: f64 = pp
            .iter()
            .zip(&qq)
            .map(|(a, b)| a * (a.max(KL_FLOOR).ln() - b.max(KL_FLOOR).ln()))
            .sum();
        let rg = self.rg(p_logits) || self.rg(q_logits);
        Ok(self.push(
            Tensor::scalar(kl.max(0.0)),
            Op::Kl {
                p: p_logits,
                q: q_logits,
                pp,
                qq,
            },
            rg,
        ))
    }

    /// Cosine similarity of two flattened tensors; a zero-norm operand yields 0 and
    /// records a warning.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if va.len() != vb.len() {
            return Err(Error::shape(format!(
                "cosine: lengths {} and {}",
                va.len(),
                vb.len()
            )));
        }
        let (c, zero) = super::tensor::cosine(va, vb);
        if zero {
            self.warnings.push("cosine of a zero vector taken as 0".into());
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(c), Op::Cosine { a, b, zero }, rg))
    }

    // ---- backward ----

    /// Propagates `∂loss/∂leaf` into every leaf that requires gradients. Calling it
    /// again without [`Graph::zero_grad`] adds to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let slot = accumulate(&mut self.leaf_grads[i], g.len());
                slot.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let want = |v: &Var| self.nodes[v.0].requires_grad;
        let len = |v: &Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(a, 1.0), (b, sign)] {
                    if want(v) {
                        let n = len(v);
                        let slot = accumulate(&mut grads[v.0], n);
                        for (j, gj) in g.iter().enumerate() {
                            slot[j % n] += s * gj;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                for (v, other) in [(a, vb), (b, va)] {
                    if want(v) {
                        let n = len(v);
                        let m = other.len();
                        let slot = accumulate(&mut grads[v.0], n);
                        for (j, gj) in g.iter().enumerate() {
                            slot[j % n] += gj * other[j % m];
                        }
                    }
                }
            }
            Op::DivFloor { a, b, eps } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if want(a) {
                    let slot = accumulate(&mut grads[a.0], va.len());
                    for j in 0..g.len() {
                        slot[j] += g[j] / vb[j].max(*eps);
                    }
                }
                if want(b) {
                    let slot = accumulate(&mut grads[b.0], vb.len());
                    for j in 0..g.len() {
                        if vb[j] > *eps {
                            slot[j] -= g[j] * va[j] / (vb[j] * vb[j]);
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let slot = accumulate(&mut grads[a.0], g.len());
                slot.iter_mut().zip(g).for_each(|(s, x)| *s += c * x);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let slot = accumulate(&mut grads[a.0], g.len());
                slot.iter_mut().zip(g).for_each(|(s, x)| *s += x);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if want(a) {
                    let slot = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, tb.data(), true, slot, 1.0);
                }
                if want(b) {
                    let slot = accumulate(&mut grads[b.0], k * n);
                    gemm(k, m, n, ta.data(), true, g, false, slot, 1.0);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                let slot = accumulate(&mut grads[a.0], m * n);
                for r in 0..m {
                    for c in 0..n {
                        slot[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let rank = node.value.shape().len();
                if rank == 1 || *axis == 0 {
                    let mut off = 0;
                    for v in inputs {
                        let n = len(v);
                        if want(v) {
                            let slot = accumulate(&mut grads[v.0], n);
                            slot.iter_mut()
                                .zip(&g[off..off + n])
                                .for_each(|(s, x)| *s += x);
                        }
                        off += n;
                    }
                } else {
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut col = 0;
                    for v in inputs {
                        let w = self.shape(*v)[1];
                        if want(v) {
                            let slot = accumulate(&mut grads[v.0], rows * w);
                            for r in 0..rows {
                                for c in 0..w {
                                    slot[r * w + c] += g[r * total + col + c];
                                }
                            }
                        }
                        col += w;
                    }
                }
            }
            Op::IndexRows { a, idx } => {
                let n = len(a);
                let row = g.len() / idx.len();
                let slot = accumulate(&mut grads[a.0], n);
                for (o, &src) in idx.iter().enumerate() {
                    for c in 0..row {
                        slot[src * row + c] += g[o * row + c];
                    }
                }
            }
            Op::Sum(a) => {
                let slot = accumulate(&mut grads[a.0], len(a));
                slot.iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Mean(a) => {
                let n = len(a);
                let slot = accumulate(&mut grads[a.0], n);
                slot.iter_mut().for_each(|s| *s += g[0] / n as f64);
            }
            Op::MeanRows(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let slot = accumulate(&mut grads[a.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        slot[i * c + j] += g[j] / r as f64;
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let slot = accumulate(&mut grads[a.0], x.len());
                for j in 0..x.len() {
                    slot[j] += g[j] * gelu_grad(x[j]);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let slot = accumulate(&mut grads[a.0], y.len());
                for r in 0..node.value.rows() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        slot[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let y = node.value.data();
                let c = node.value.cols();
                let slot = accumulate(&mut grads[a.0], y.len());
                for (r, rs) in rstd.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let sg: f64 = gr.iter().sum();
                    let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        slot[r * c + j] +=
                            rs / c as f64 * (c as f64 * gr[j] - sg - yr[j] * sgy);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                scale,
                probs,
            } => {
                let d = self.shape(*q)[1];
                let n = self.shape(*q)[0];
                let dh = d / heads;
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut pi = 0;
                for members in &groups.groups {
                    let l = members.len();
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[pi];
                        pi += 1;
                        for (i, &ti) in members.iter().enumerate() {
                            let inv = 1.0 / groups.counts[ti] as f64;
                            let go = &g[ti * d + off..ti * d + off + dh];
                            let prow = &p[i * l..(i + 1) * l];
                            let mut dp = vec![0.0; l];
                            for (j, &tj) in members.iter().enumerate() {
                                let vj = &vd[tj * d + off..tj * d + off + dh];
                                dp[j] = inv * go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                                let w = prow[j] * inv;
                                for c in 0..dh {
                                    dv[tj * d + off + c] += w * go[c];
                                }
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for (j, &tj) in members.iter().enumerate() {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq[ti * d + off + c] += ds * kd[tj * d + off + c];
                                    dk[tj * d + off + c] += ds * qd[ti * d + off + c];
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if want(var) {
                        let slot = accumulate(&mut grads[var.0], n * d);
                        slot.iter_mut().zip(&buf).for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::CrossEntropy { a, label, probs } => {
                let slot = accumulate(&mut grads[a.0], probs.len());
                for (j, p) in probs.iter().enumerate() {
                    let t = if j == *label { 1.0 } else { 0.0 };
                    slot[j] += g[0] * (p - t);
                }
            }
            Op::Kl { p, q, pp, qq } => {
                let kl = node.value.item();
                if want(p) {
                    let slot = accumulate(&mut grads[p.0], pp.len());
                    for j in 0..pp.len() {
                        let lr = pp[j].max(KL_FLOOR).ln() - qq[j].max(KL_FLOOR).ln();
                        slot[j] += g[0] * pp[j] * (lr - kl);
                    }
                }
                if want(q) {
                    let slot = accumulate(&mut grads[q.0], qq.len());
                    for j in 0..qq.len() {
                        slot[j] += g[0] * (qq[j] - pp[j]);
                    }
                }
            }
            Op::Cosine { a, b, zero } => {
                if *zero {
                    return;
                }
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let na = super::tensor::norm(va);
                let nb = super::tensor::norm(vb);
                let c = super::tensor::dot(va, vb) / (na * nb);
                for (v, x, y, nx) in [(a, va, vb, na), (b, vb, va, nb)] {
                    if want(v) {
                        let slot = accumulate(&mut grads[v.0], x.len());
                        for j in 0..x.len() {
                            slot[j] += g[0] * (y[j] / (na * nb) - c * x[j] / (nx * nx));
                        }
                    }
                }
            }
        }
    }
}
