use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    SoftClip(Var, f64),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    LogSumExp {
        input: Var,
        axis: usize,
    },
    SymInvSqrt {
        input: Var,
        eigvals: Vec<f64>,
        eigvecs: Vec<f64>,
        floor: f64,
    },
    NuclearNorm {
        input: Var,
        /// U Vᵀ of the thin SVD, the subgradient of the nuclear norm.
        polar: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | SoftClip(a, _) | Offset(a) | Transpose(a) | Reshape(a) | Relu(a) | Tanh(a) | Exp(a)
            | Log(a) | Square(a) | Sum(a) | Mean(a) => vec![*a],
            Concat { inputs, .. } => inputs.clone(),
            Slice { input, .. }
            | Gather { input, .. }
            | SumAxis { input, .. }
            | LogSumExp { input, .. }
            | SymInvSqrt { input, .. }
            | NuclearNorm { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications for one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and a single reverse sweep is a valid backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if `var` is not a trainable leaf.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, shape, &[axis]));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("primitive produced consistent shape")
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    /// `x[.., m] + b[m]`, broadcasting `b` over all leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let m = sb[0];
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (d, bv) in chunk.iter_mut().zip(&bias) {
                *d += bv;
            }
        }
        let v = with_shape(self.shape(x), data);
        Ok(self.push(v, Op::AddBias(x, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = linalg::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = with_shape(&[m, n], data);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::shape("transpose", sa, &[0, 0]));
        }
        let (m, n) = (sa[0], sa[1]);
        let data = linalg::transpose(self.value(a).data(), m, n);
        let v = with_shape(&[n, m], data);
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let w = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let v = with_shape(&out_shape, data);
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        check_axis("slice", &sa, axis)?;
        if len == 0 || start + len > sa[axis] {
            return Err(Error::shape("slice", &sa, &[start, len]));
        }
        let (outer, n, inner) = axis_split(&sa, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = sa;
        out_shape[axis] = len;
        let v = with_shape(&out_shape, data);
        Ok(self.push(v, Op::Slice { input: a, axis, start }))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(a);
        if n != index.len() || index.iter().any(|&i| i >= src.len()) {
            return Err(Error::shape("gather", src.shape(), shape));
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let v = with_shape(shape, data);
        Ok(self.push(v, Op::Gather { input: a, index }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// `c·tanh(x / c)`, kept strictly inside `(-c, c)` even where tanh
    /// rounds to ±1.
    pub fn soft_clip(&mut self, a: Var, c: f64) -> Var {
        let edge = c.next_down();
        let v = self.value(a).map(|x| (c * (x / c).tanh()).clamp(-edge, edge));
        self.push(v, Op::SoftClip(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad} is not positive"),
            });
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        check_axis("sum_axis", &sa, axis)?;
        let (outer, n, inner) = axis_split(&sa, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        let mut out_shape = sa;
        out_shape.remove(axis);
        let v = with_shape(&out_shape, data);
        Ok(self.push(v, Op::SumAxis { input: a, axis }))
    }

    /// Max-shifted `log Σ exp` over `axis`, removing it from the shape.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        check_axis("logsumexp", &sa, axis)?;
        let (outer, n, inner) = axis_split(&sa, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| src[(o * n + k) * inner + i];
                let m = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n).map(|k| (at(k) - m).exp()).sum();
                data[o * inner + i] = m + s.ln();
            }
        }
        let mut out_shape = sa;
        out_shape.remove(axis);
        let v = with_shape(&out_shape, data);
        Ok(self.push(v, Op::LogSumExp { input: a, axis }))
    }

    /// `sym(A)^{-1/2}` with eigenvalues clamped below at `floor`.
    pub fn sym_inv_sqrt(&mut self, a: Var, floor: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != sa[1] {
            return Err(Error::shape("sym_inv_sqrt", &sa, &[sa[0], sa[0]]));
        }
        let n = sa[0];
        if !self.value(a).is_finite() {
            return Err(Error::NonFinite("sym_inv_sqrt input".into()));
        }
        let (eigvals, eigvecs) = linalg::sym_eigen(self.value(a).data(), n);
        let d: Vec<f64> = eigvals.iter().map(|&l| l.max(floor).powf(-0.5)).collect();
        let v = with_shape(&sa, linalg::reassemble(&eigvecs, &d, n));
        Ok(self.push(
            v,
            Op::SymInvSqrt {
                input: a,
                eigvals,
                eigvecs,
                floor,
            },
        ))
    }

    /// Sum of singular values of a matrix.
    pub fn nuclear_norm(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape("nuclear_norm", &sa, &[0, 0]));
        }
        if !self.value(a).is_finite() {
            return Err(Error::NonFinite("nuclear_norm input".into()));
        }
        let (m, n) = (sa[0], sa[1]);
        let r = m.min(n);
        let (u, s, vt) = linalg::svd(self.value(a).data(), m, n);
        let polar = linalg::matmul(&u, &vt, m, r, n);
        let total = s.iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::NuclearNorm { input: a, polar }))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable leaf gets an entry; leaves the loss does not depend on
    /// get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.needs_grad {
                    let data = grads
                        .get_mut(i)
                        .and_then(|g| g.take())
                        .unwrap_or_else(|| vec![0.0; n.value.len()]);
                    Some(with_shape(n.value.shape(), data))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, k) => acc(*a, g.iter().map(|x| x * k).collect()),
            Op::Offset(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::AddBias(x, b) => {
                acc(*x, g.to_vec());
                let m = self.nodes[b.0].value.len();
                let mut db = vec![0.0; m];
                for chunk in g.chunks(m) {
                    for (d, c) in db.iter_mut().zip(chunk) {
                        *d += c;
                    }
                }
                acc(*b, db);
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].needs_grad {
                    acc(*a, linalg::matmul_nt(g, val(*b), m, n, k));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, linalg::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                acc(*a, linalg::transpose(g, s[0], s[1]));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.nodes[v.0].value.shape()[*axis];
                    let mut part = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g[base..base + n * inner]);
                    }
                    acc(v, part);
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let sa = self.nodes[input.0].value.shape();
                let (outer, n, inner) = axis_split(sa, *axis);
                let len = node.value.shape()[*axis];
                let mut full = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(*input, full);
            }
            Op::Gather { input, index } => {
                let mut full = vec![0.0; self.nodes[input.0].value.len()];
                for (gi, &i) in g.iter().zip(index) {
                    full[i] += gi;
                }
                acc(*input, full);
            }
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect(),
            ),
            Op::Tanh(a) => acc(*a, g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect()),
            Op::SoftClip(a, c) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(x, y)| {
                        let t = (y / c).tanh();
                        x * (1.0 - t * t)
                    })
                    .collect(),
            ),
            Op::Exp(a) => acc(*a, g.iter().zip(out).map(|(x, y)| x * y).collect()),
            Op::Log(a) => acc(*a, g.iter().zip(val(*a)).map(|(x, y)| x / y).collect()),
            Op::Square(a) => acc(*a, g.iter().zip(val(*a)).map(|(x, y)| 2.0 * x * y).collect()),
            Op::Sum(a) => acc(*a, vec![g[0]; self.nodes[a.0].value.len()]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { input, axis } => {
                let (outer, n, inner) = axis_split(self.nodes[input.0].value.shape(), *axis);
                let mut full = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let dst = (o * n + k) * inner;
                        full[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*input, full);
            }
            Op::LogSumExp { input, axis } => {
                let x = val(*input);
                let (outer, n, inner) = axis_split(self.nodes[input.0].value.shape(), *axis);
                let mut full = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let y = out[o * inner + i];
                        let gy = g[o * inner + i];
                        for k in 0..n {
                            let at = (o * n + k) * inner + i;
                            full[at] = gy * (x[at] - y).exp();
                        }
                    }
                }
                acc(*input, full);
            }
            Op::SymInvSqrt {
                input,
                eigvals,
                eigvecs,
                floor,
            } => {
                let n = eigvals.len();
                let f = |l: f64| l.max(*floor).powf(-0.5);
                let df = |l: f64| if l > *floor { -0.5 * l.powf(-1.5) } else { 0.0 };
                // Daleckii-Krein: dA = Q (F ∘ (Qᵀ sym(G) Q)) Qᵀ
                let gt = linalg::transpose(g, n, n);
                let gs: Vec<f64> = g.iter().zip(&gt).map(|(a, b)| 0.5 * (a + b)).collect();
                let qt_g = linalg::matmul_tn(eigvecs, &gs, n, n, n);
                let mut inner = linalg::matmul(&qt_g, eigvecs, n, n, n);
                for i in 0..n {
                    for j in 0..n {
                        let (li, lj) = (eigvals[i], eigvals[j]);
                        let scale = 1e-10 * (li.abs() + lj.abs()).max(1e-300);
                        let w = if (li - lj).abs() > scale {
                            (f(li) - f(lj)) / (li - lj)
                        } else {
                            df(0.5 * (li + lj))
                        };
                        inner[i * n + j] *= w;
                    }
                }
                let left = linalg::matmul(eigvecs, &inner, n, n, n);
                acc(*input, linalg::matmul_nt(&left, eigvecs, n, n, n));
            }
            Op::NuclearNorm { input, polar } => {
                acc(*input, polar.iter().map(|p| p * g[0]).collect());
            }
        }
    }
}
