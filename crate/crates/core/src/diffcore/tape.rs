use std::rc::Rc;

use super::ops::{axis_split, broadcast_shape, for_each_broadcast, gemm_acc, sigmoid, softplus};
use super::{DiffError, Tensor};

type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Relu,
    LeakyRelu(f64),
    Softplus,
    Sigmoid,
    Tanh,
    Sin,
    Cos,
    Square,
    Powf(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Reduce {
        kind: Reduce,
        input: Var,
        axis: Option<usize>,
        /// first argmax per output element (max only)
        argmax: Vec<usize>,
    },
    Softmax(Var, usize),
    CumSum {
        input: Var,
        axis: usize,
        exclusive: bool,
    },
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    Gather {
        table: Var,
        index: Rc<[u32]>,
        weight: Rc<[f64]>,
        k: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with `requires_grad`; zeros when the
    /// leaf is disconnected from the loss. `None` for other nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| DiffError::ShapeMismatch {
            op: match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0; n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            macro_rules! run {
                ($e:expr) => {
                    for_each_broadcast(&sa, &sb, &out_shape, |i, ia, ib| {
                        let (x, y) = (da[ia], db[ib]);
                        out[i] = $e(x, y);
                    })
                };
            }
            match kind {
                Binary::Add => run!(|x: f64, y: f64| x + y),
                Binary::Sub => run!(|x: f64, y: f64| x - y),
                Binary::Mul => run!(|x: f64, y: f64| x * y),
                Binary::Div => run!(|x: f64, y: f64| x / y),
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = self.value(a);
        let f: fn(f64, f64) -> f64 = match kind {
            Unary::Neg => |x, _| -x,
            Unary::Exp => |x, _| x.exp(),
            Unary::Log => |x, _| x.ln(),
            Unary::Relu => |x, _| x.max(0.0),
            Unary::LeakyRelu(_) => |x, s| if x > 0.0 { x } else { s * x },
            Unary::Softplus => |x, _| softplus(x),
            Unary::Sigmoid => |x, _| sigmoid(x),
            Unary::Tanh => |x, _| x.tanh(),
            Unary::Sin => |x, _| x.sin(),
            Unary::Cos => |x, _| x.cos(),
            Unary::Square => |x, _| x * x,
            Unary::Powf(_) => |x, p| x.powf(p),
            Unary::Scale(_) => |x, c| x * c,
            Unary::AddScalar(_) => |x, c| x + c,
        };
        let param = match kind {
            Unary::LeakyRelu(p) | Unary::Powf(p) | Unary::Scale(p) | Unary::AddScalar(p) => p,
            _ => 0.0,
        };
        let data: Vec<f64> = x.data().iter().map(|&v| f(v, param)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(Unary::Powf(p), a)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), a)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::InnerDim {
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    // ---- reductions --------------------------------------------------

    /// Reduces along `axis` (dropping it) or over everything when `None`.
    pub fn reduce(&mut self, kind: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let x = self.value(a).data();
        let (out_shape, outer, len, inner) = match axis {
            None => (vec![], 1, x.len(), 1),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(DiffError::InvalidAxis {
                        op: "reduce",
                        axis: ax,
                        rank: shape.len(),
                    });
                }
                let (o, l, i) = axis_split(&shape, ax);
                let mut s = shape.clone();
                s.remove(ax);
                (s, o, l, i)
            }
        };
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let row = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if kind == Reduce::Mean && len > 0 {
                    let inv = len as f64;
                    out.iter_mut().for_each(|v| *v /= inv);
                }
            }
            Reduce::Max => {
                if len == 0 {
                    return Err(DiffError::InvalidAxis {
                        op: "max of empty axis",
                        axis: axis.unwrap_or(0),
                        rank: shape.len(),
                    });
                }
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for l in 0..len {
                            let v = x[(o * len + l) * inner + i];
                            // strict comparison keeps the first maximum
                            if v > best || l == 0 {
                                best = v;
                                bi = l;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = bi;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Reduce {
                kind,
                input: a,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Sum, a, None).expect("full reduction")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Mean, a, None).expect("full reduction")
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Sum, a, Some(axis))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - m).exp();
                    out[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[at(l)] /= s;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a, axis), rg))
    }

    /// Cumulative sum along `axis`; `exclusive` shifts by one so that the
    /// first element is zero.
    pub fn cumsum(&mut self, a: Var, axis: usize, exclusive: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::InvalidAxis {
                op: "cumsum",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                for l in 0..len {
                    let at = (o * len + l) * inner + i;
                    if exclusive {
                        out[at] = acc;
                        acc += x[at];
                    } else {
                        acc += x[at];
                        out[at] = acc;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::CumSum {
                input: a,
                axis,
                exclusive,
            },
            rg,
        ))
    }

    // ---- shape manipulation ------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(DiffError::InvalidAxis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(DiffError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let l = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut s = first;
        s[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(s, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Weighted row gather: for each output row `p`,
    /// `out[p] = Σ_j weight[p·k+j] · table[index[p·k+j]]`.
    ///
    /// `table` must be 2-D. A zero weight with any valid index encodes a
    /// missing neighbour (padding, inactive voxel, out-of-image sample).
    /// Differentiable with respect to `table` only.
    pub fn gather(
        &mut self,
        table: Var,
        index: impl Into<Rc<[u32]>>,
        weight: impl Into<Rc<[f64]>>,
        k: usize,
    ) -> Result<Var> {
        let index: Rc<[u32]> = index.into();
        let weight: Rc<[f64]> = weight.into();
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(DiffError::Gather(format!("table must be 2-D, got {ts:?}")));
        }
        let (rows, c) = (ts[0], ts[1]);
        if k == 0 || index.len() != weight.len() || index.len() % k != 0 {
            return Err(DiffError::Gather(format!(
                "{} indices / {} weights not divisible into groups of {k}",
                index.len(),
                weight.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= rows) {
            return Err(DiffError::Gather(format!("index {bad} >= {rows} rows")));
        }
        let p = index.len() / k;
        let t = self.value(table).data();
        let mut out = vec![0.0; p * c];
        for r in 0..p {
            let dst = &mut out[r * c..(r + 1) * c];
            for j in 0..k {
                let w = weight[r * k + j];
                if w == 0.0 {
                    continue;
                }
                let src = &t[index[r * k + j] as usize * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![p, c], out)?,
            Op::Gather {
                table,
                index,
                weight,
                k,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut result: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                result[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && result[i].is_none() {
                result[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: result })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<()> {
            if !self.rg(v) {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; self.value(v).numel()]);
            }
            Some(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let out = node.value.shape();
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if acc(a, grads).is_some() {
                    let ga = grads[a.0].as_mut().unwrap();
                    match kind {
                        Binary::Add | Binary::Sub => {
                            for_each_broadcast(sa, sb, out, |o, ia, _| ga[ia] += g[o])
                        }
                        Binary::Mul => {
                            for_each_broadcast(sa, sb, out, |o, ia, ib| ga[ia] += g[o] * db[ib])
                        }
                        Binary::Div => {
                            for_each_broadcast(sa, sb, out, |o, ia, ib| ga[ia] += g[o] / db[ib])
                        }
                    }
                }
                if acc(b, grads).is_some() {
                    let gb = grads[b.0].as_mut().unwrap();
                    match kind {
                        Binary::Add => for_each_broadcast(sa, sb, out, |o, _, ib| gb[ib] += g[o]),
                        Binary::Sub => for_each_broadcast(sa, sb, out, |o, _, ib| gb[ib] -= g[o]),
                        Binary::Mul => {
                            for_each_broadcast(sa, sb, out, |o, ia, ib| gb[ib] += g[o] * da[ia])
                        }
                        Binary::Div => for_each_broadcast(sa, sb, out, |o, ia, ib| {
                            gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib])
                        }),
                    }
                }
            }
            Op::Unary(kind, a) => {
                let a = *a;
                if acc(a, grads).is_none() {
                    return;
                }
                let x = self.value(a).data();
                let y = node.value.data();
                let ga = grads[a.0].as_mut().unwrap();
                for j in 0..ga.len() {
                    let d = match *kind {
                        Unary::Neg => -1.0,
                        Unary::Exp => y[j],
                        Unary::Log => 1.0 / x[j],
                        Unary::Relu => {
                            if x[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::LeakyRelu(s) => {
                            if x[j] > 0.0 {
                                1.0
                            } else {
                                s
                            }
                        }
                        Unary::Softplus => sigmoid(x[j]),
                        Unary::Sigmoid => y[j] * (1.0 - y[j]),
                        Unary::Tanh => 1.0 - y[j] * y[j],
                        Unary::Sin => x[j].cos(),
                        Unary::Cos => -x[j].sin(),
                        Unary::Square => 2.0 * x[j],
                        Unary::Powf(p) => p * x[j].powf(p - 1.0),
                        Unary::Scale(c) => c,
                        Unary::AddScalar(_) => 1.0,
                    };
                    ga[j] += g[j] * d;
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if acc(a, grads).is_some() {
                    // dA = dC · Bᵀ
                    let ga = grads[a.0].as_mut().unwrap();
                    gemm_acc(m, n, k, g, n as isize, 1, self.value(b).data(), 1, n as isize, ga);
                }
                if acc(b, grads).is_some() {
                    // dB = Aᵀ · dC
                    let gb = grads[b.0].as_mut().unwrap();
                    gemm_acc(k, m, n, self.value(a).data(), 1, k as isize, g, n as isize, 1, gb);
                }
            }
            Op::Reduce {
                kind,
                input,
                axis,
                argmax,
            } => {
                let a = *input;
                if acc(a, grads).is_none() {
                    return;
                }
                let shape = self.shape(a);
                let (outer, len, inner) = match axis {
                    None => (1, self.value(a).numel(), 1),
                    Some(ax) => axis_split(shape, *ax),
                };
                let ga = grads[a.0].as_mut().unwrap();
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let s = if *kind == Reduce::Mean {
                            1.0 / len as f64
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    ga[(o * len + l) * inner + i] += g[o * inner + i] * s;
                                }
                            }
                        }
                    }
                    Reduce::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let l = argmax[o * inner + i];
                                ga[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let a = *a;
                if acc(a, grads).is_none() {
                    return;
                }
                let (outer, len, inner) = axis_split(self.shape(a), *axis);
                let y = node.value.data();
                let ga = grads[a.0].as_mut().unwrap();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            ga[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
            Op::CumSum {
                input,
                axis,
                exclusive,
            } => {
                let a = *input;
                if acc(a, grads).is_none() {
                    return;
                }
                let (outer, len, inner) = axis_split(self.shape(a), *axis);
                let ga = grads[a.0].as_mut().unwrap();
                for o in 0..outer {
                    for i in 0..inner {
                        // reverse cumulative sum of the incoming gradient
                        let mut accg = 0.0;
                        for l in (0..len).rev() {
                            let at = (o * len + l) * inner + i;
                            if *exclusive {
                                ga[at] += accg;
                                accg += g[at];
                            } else {
                                accg += g[at];
                                ga[at] += accg;
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                if acc(a, grads).is_some() {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Narrow { input, axis, start } => {
                let a = *input;
                if acc(a, grads).is_none() {
                    return;
                }
                let (outer, full, inner) = axis_split(self.shape(a), *axis);
                let len = node.value.shape()[*axis];
                let ga = grads[a.0].as_mut().unwrap();
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut ga[(o * full + start) * inner..][..len * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let l = self.shape(p)[*axis];
                    if acc(p, grads).is_some() {
                        let gp = grads[p.0].as_mut().unwrap();
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..l * inner];
                            let dst = &mut gp[o * l * inner..(o + 1) * l * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += l;
                }
            }
            Op::Gather {
                table,
                index,
                weight,
                k,
            } => {
                let t = *table;
                if acc(t, grads).is_none() {
                    return;
                }
                let c = self.shape(t)[1];
                let gt = grads[t.0].as_mut().unwrap();
                let p = index.len() / k;
                for r in 0..p {
                    let src = &g[r * c..(r + 1) * c];
                    for j in 0..*k {
                        let w = weight[r * k + j];
                        if w == 0.0 {
                            continue;
                        }
                        let dst = &mut gt[index[r * k + j] as usize * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
    }
}
