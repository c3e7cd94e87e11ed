//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every step. Each primitive evaluates its
//! forward value immediately and records enough to run the vector-Jacobian
//! product later. Parameters are read from a borrowed [`ParameterSet`] and
//! become leaves the first time a program asks for them.

use std::collections::{BTreeMap, BTreeSet};

use super::params::{NamedTensors, ParameterSet};
use super::tensor::{broadcast_index_map, broadcast_shape, Scalar, Tensor};
use super::DiffError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Powf(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    Variance(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    ArgMax,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Powf(..) => "powf",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Variance(..) => "variance",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::ArgMax => "argmax",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    label: String,
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(acc: &mut Option<Vec<T>>, g: Vec<T>) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x = *x + y),
        None => *acc = Some(g),
    }
}

/// Sums a gradient of `out_shape` back down to a broadcast operand's `shape`.
fn reduce_broadcast<T: Scalar>(g: &[T], shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    if shape == out_shape {
        return g.to_vec();
    }
    let map = broadcast_index_map(shape, out_shape);
    let mut acc = vec![0.0f64; shape.iter().product()];
    for (o, &i) in map.iter().enumerate() {
        acc[i] += g[o].f64();
    }
    acc.into_iter().map(T::of).collect()
}

/// Forward matmul over `[.., n, k] x [k, m]` or batched `[.., n, k] x [.., k, m]`.
fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Option<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return None;
    }
    let (n, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, m) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != kb {
        return None;
    }
    let mut out_shape = a.shape()[..ra - 2].to_vec();
    out_shape.extend([n, m]);
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let mut out = vec![T::zero(); batch * n * m];
    if rb == 2 {
        T::gemm(batch * n, k, m, a.data(), k as isize, 1, b.data(), m as isize, 1, T::zero(), &mut out);
    } else {
        if a.shape()[..ra - 2] != b.shape()[..rb - 2] {
            return None;
        }
        for bi in 0..batch {
            T::gemm(
                n,
                k,
                m,
                &a.data()[bi * n * k..],
                k as isize,
                1,
                &b.data()[bi * k * m..],
                m as isize,
                1,
                T::zero(),
                &mut out[bi * n * m..(bi + 1) * n * m],
            );
        }
    }
    Some(Tensor::from_parts(out_shape, out))
}

/// Builder and tape for one forward/backward evaluation.
pub struct Graph<'p, T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: &'p ParameterSet<T>,
    inputs: Option<&'p NamedTensors<T>>,
    param_nodes: BTreeMap<String, Var>,
    frozen_prefixes: Vec<String>,
    track_grads: bool,
    scope: Vec<String>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            params,
            inputs: None,
            param_nodes: BTreeMap::new(),
            frozen_prefixes: Vec::new(),
            track_grads: true,
            scope: Vec::new(),
        }
    }

    pub fn with_inputs(mut self, inputs: &'p NamedTensors<T>) -> Self {
        self.inputs = Some(inputs);
        self
    }

    /// Parameters under any of these path prefixes become constants.
    pub fn with_frozen(mut self, prefixes: &[String]) -> Self {
        self.frozen_prefixes = prefixes.to_vec();
        self
    }

    /// Inference mode: no node requires a gradient.
    pub fn no_grad(mut self) -> Self {
        self.track_grads = false;
        self
    }

    pub fn params(&self) -> &'p ParameterSet<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Runs `f` with `name` pushed onto the label scope used in diagnostics.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn label(&self, op: &Op) -> String {
        let mut s = self.scope.join("/");
        if !s.is_empty() {
            s.push('/');
        }
        s.push_str(op.name());
        s
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Result<Var, DiffError> {
        let label = self.label(&op);
        if !value.all_finite() {
            return Err(DiffError::NonFiniteValue { context: label });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track_grads,
            label,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, vars: &[Var]) -> DiffError {
        DiffError::ShapeMismatch {
            op,
            shapes: vars.iter().map(|&v| self.shape(v).to_vec()).collect(),
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    // ── leaves ────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var, DiffError> {
        self.push(t, Op::Leaf, false)
    }

    pub fn input(&mut self, name: &str) -> Result<Var, DiffError> {
        let t = self
            .inputs
            .and_then(|i| i.get(name))
            .ok_or_else(|| DiffError::MissingInput(name.to_string()))?
            .clone();
        self.constant(t)
    }

    /// Parameter leaf; repeated requests for the same path share one node.
    pub fn param(&mut self, path: &str) -> Result<Var, DiffError> {
        if let Some(&v) = self.param_nodes.get(path) {
            return Ok(v);
        }
        let t = self
            .params
            .get(path)
            .ok_or_else(|| DiffError::MissingParam(path.to_string()))?
            .clone();
        let frozen = self.frozen_prefixes.iter().any(|p| path.starts_with(p.as_str()));
        let label = path.to_string();
        self.nodes.push(Node {
            value: t,
            op: Op::Param,
            requires_grad: !frozen && self.track_grads,
            label,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(path.to_string(), v);
        Ok(v)
    }

    // ── linear algebra and shape ─────────────────────────────────────

    /// `[.., n, k] · [k, m]` or batched `[.., n, k] · [.., k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = matmul_forward(self.value(a), self.value(b))
            .ok_or_else(|| self.mismatch("matmul", &[a, b]))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let r = t.rank();
        if r < 2 {
            return Err(self.mismatch("transpose", &[x]));
        }
        let (n, m) = (t.shape()[r - 2], t.shape()[r - 1]);
        let batch = t.len() / (n * m);
        let src = t.data();
        let mut out = vec![T::zero(); t.len()];
        for b in 0..batch {
            let o = b * n * m;
            for i in 0..n {
                for j in 0..m {
                    out[o + j * n + i] = src[o + i * m + j];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self
            .value(x)
            .reshape(shape)
            .map_err(|_| self.mismatch("reshape", &[x]))?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else {
            let shape =
                broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| self.mismatch(name, &[a, b]))?;
            let ma = broadcast_index_map(ta.shape(), &shape);
            let mb = broadcast_index_map(tb.shape(), &shape);
            let (da, db) = (ta.data(), tb.data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::from_parts(shape, data)
        };
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var, DiffError> {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        let k = T::of(c);
        self.unary(x, Op::Scale(x, c), |v| v * k)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, DiffError> {
        self.scale(x, -1.0)
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        let k = T::of(c);
        self.unary(x, Op::Offset(x), |v| v + k)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var, DiffError> {
        let k = T::of(p);
        self.unary(x, Op::Powf(x, p), |v| v.powf(k))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Op::LogSigmoid(x), |v| {
            // -softplus(-v)
            let m = (-v).max(T::zero());
            -(m + ((-m).exp() + (-v - m).exp()).ln())
        })
    }

    // ── axis reductions ──────────────────────────────────────────────

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<(), DiffError> {
        if axis >= self.value(x).rank() {
            return Err(DiffError::AxisOutOfRange {
                op,
                axis,
                shape: self.shape(x).to_vec(),
            });
        }
        Ok(())
    }

    fn reduce(
        &mut self,
        x: Var,
        axis: usize,
        name: &'static str,
        op: Op,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<Var, DiffError> {
        self.check_axis(x, axis, name)?;
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0f64; n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = src[(o * n + j) * inner + i].f64();
                }
                out.push(T::of(f(&buf)));
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.reduce(x, axis, "sum", Op::Sum(x, axis), |v| v.iter().sum())
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.reduce(x, axis, "mean", Op::Mean(x, axis), |v| {
            v.iter().sum::<f64>() / v.len() as f64
        })
    }

    /// Population variance along `axis`, keeping it with length 1.
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.reduce(x, axis, "variance", Op::Variance(x, axis), |v| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n
        })
    }

    /// Sum of every element as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, DiffError> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, DiffError> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.mean_axis(flat, 0)
    }

    fn softmax_like(&mut self, x: Var, axis: usize, log: bool) -> Result<Var, DiffError> {
        let name = if log { "log_softmax" } else { "softmax" };
        self.check_axis(x, axis, name)?;
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); t.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| src[at(j)].f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|j| (src[at(j)].f64() - mx).exp()).sum();
                let lz = z.ln();
                for j in 0..n {
                    let s = src[at(j)].f64() - mx;
                    out[at(j)] = T::of(if log { s - lz } else { s.exp() / z });
                }
            }
        }
        let op = if log { Op::LogSoftmax(x, axis) } else { Op::Softmax(x, axis) };
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(t.shape().to_vec(), out), op, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.softmax_like(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.softmax_like(x, axis, true)
    }

    // ── structural ───────────────────────────────────────────────────

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = *xs.first().ok_or(DiffError::ShapeMismatch {
            op: "concat",
            shapes: vec![],
        })?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(self.mismatch("concat", xs));
            }
        }
        let total: usize = xs.iter().map(|&v| self.shape(v)[axis]).sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let rg = self.rg(xs);
        self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis), rg)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        self.check_axis(x, axis, "slice")?;
        let t = self.value(x);
        let (outer, n, inner) = axis_split(t.shape(), axis);
        if len == 0 || start + len > n {
            return Err(self.mismatch("slice", &[x]));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, rg)
    }

    /// Row lookup into a `[V, d]` table; output `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(self.mismatch("gather", &[table]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(DiffError::IndexOutOfRange { index: bad, len: v });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Hard argmax along the last axis (indices as values). Not
    /// differentiable: backward through it is rejected.
    pub fn argmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let r = t.rank();
        let n = t.shape()[r - 1];
        let out: Vec<T> = t
            .data()
            .chunks(n)
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                T::of(best as f64)
            })
            .collect();
        let mut shape = t.shape().to_vec();
        shape[r - 1] = 1;
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::ArgMax, rg)
    }

    // ── composites used throughout the model ─────────────────────────

    /// `x · w + b` with `w: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var, DiffError> {
        let w = self.param(&format!("{prefix}.w"))?;
        let y = self.matmul(x, w)?;
        let bp = format!("{prefix}.b");
        if self.params.get(&bp).is_some() {
            let b = self.param(&bp)?;
            self.add(y, b)
        } else {
            Ok(y)
        }
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    /// Standardizes along the last axis: `(x - mean) / sqrt(var + eps)`.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var, DiffError> {
        let axis = self.value(x).rank() - 1;
        let m = self.mean_axis(x, axis)?;
        let v = self.var_axis(x, axis)?;
        let c = self.sub(x, m)?;
        let ve = self.offset(v, eps)?;
        let inv = self.powf(ve, -0.5)?;
        self.mul(c, inv)
    }

    /// Rows scaled to unit L2 norm along the last axis (with a small floor).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var, DiffError> {
        let axis = self.value(x).rank() - 1;
        let sq = self.mul(x, x)?;
        let ss = self.sum_axis(sq, axis)?;
        let sse = self.offset(ss, eps)?;
        let inv = self.powf(sse, -0.5)?;
        self.mul(x, inv)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Gradients of the scalar `loss` for every parameter in the bound set.
    /// Parameters the loss does not reach (or that are frozen) get zeros.
    pub fn backward(&self, loss: Var) -> Result<ParameterSet<T>, DiffError> {
        let node_grads = self.backward_nodes(loss)?;
        let mut out = ParameterSet::new();
        for (path, t) in self.params.iter() {
            let g = self
                .param_nodes
                .get(path)
                .and_then(|v| node_grads[v.0].as_ref())
                .map(|g| Tensor::from_parts(t.shape().to_vec(), g.clone()))
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(path.clone(), g);
        }
        Ok(out)
    }

    /// Gradient of the scalar `loss` with respect to arbitrary nodes.
    pub fn grad_of(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>, DiffError> {
        let node_grads = self.backward_nodes(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                let shape = self.shape(*v).to_vec();
                match &node_grads[v.0] {
                    Some(g) => Tensor::from_parts(shape, g.clone()),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn backward_nodes(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let keep = matches!(node.op, Op::Param | Op::Leaf);
            self.vjp(idx, &g, &mut grads)?;
            if keep {
                grads[idx] = Some(g);
            }
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), DiffError> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::ArgMax => {
                return Err(DiffError::NonDifferentiable {
                    op: "argmax",
                    node: node.label.clone(),
                })
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ra, rb) = (ta.rank(), tb.rank());
                let (n, k) = (ta.shape()[ra - 2], ta.shape()[ra - 1]);
                let m = tb.shape()[rb - 1];
                let batch = ta.len() / (n * k);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); ta.len()];
                    if rb == 2 {
                        // g[bn, m] · bᵀ
                        T::gemm(batch * n, m, k, g, m as isize, 1, tb.data(), 1, m as isize, T::zero(), &mut da);
                    } else {
                        for bi in 0..batch {
                            T::gemm(
                                n,
                                m,
                                k,
                                &g[bi * n * m..],
                                m as isize,
                                1,
                                &tb.data()[bi * k * m..],
                                1,
                                m as isize,
                                T::zero(),
                                &mut da[bi * n * k..(bi + 1) * n * k],
                            );
                        }
                    }
                    add_into(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); tb.len()];
                    if rb == 2 {
                        // aᵀ[k, bn] · g[bn, m]
                        T::gemm(k, batch * n, m, ta.data(), 1, k as isize, g, m as isize, 1, T::zero(), &mut db);
                    } else {
                        for bi in 0..batch {
                            T::gemm(
                                k,
                                n,
                                m,
                                &ta.data()[bi * n * k..],
                                1,
                                k as isize,
                                &g[bi * n * m..],
                                m as isize,
                                1,
                                T::zero(),
                                &mut db[bi * k * m..(bi + 1) * k * m],
                            );
                        }
                    }
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Transpose(x) => {
                let r = out_shape.len();
                let (n, m) = (out_shape[r - 2], out_shape[r - 1]);
                let batch = g.len() / (n * m);
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..batch {
                    let o = b * n * m;
                    for i in 0..n {
                        for j in 0..m {
                            dx[o + j * n + i] = g[o + i * m + j];
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g.to_vec()),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.wants(*a) {
                    add_into(&mut grads[a.0], reduce_broadcast(g, self.shape(*a), out_shape));
                }
                if self.wants(*b) {
                    let gb: Vec<T> = g.iter().map(|&v| v * sign).collect();
                    add_into(&mut grads[b.0], reduce_broadcast(&gb, self.shape(*b), out_shape));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ma = broadcast_index_map(ta.shape(), out_shape);
                let mb = broadcast_index_map(tb.shape(), out_shape);
                let (da_, db_) = (ta.data(), tb.data());
                if self.wants(*a) {
                    let ga: Vec<T> = (0..g.len())
                        .map(|o| if is_div { g[o] / db_[mb[o]] } else { g[o] * db_[mb[o]] })
                        .collect();
                    add_into(&mut grads[a.0], reduce_broadcast(&ga, ta.shape(), out_shape));
                }
                if self.wants(*b) {
                    let gb: Vec<T> = (0..g.len())
                        .map(|o| {
                            if is_div {
                                -g[o] * y[o] / db_[mb[o]]
                            } else {
                                g[o] * da_[ma[o]]
                            }
                        })
                        .collect();
                    add_into(&mut grads[b.0], reduce_broadcast(&gb, tb.shape(), out_shape));
                }
            }
            Op::Scale(x, c) => {
                let k = T::of(*c);
                add_into(&mut grads[x.0], g.iter().map(|&v| v * k).collect());
            }
            Op::Offset(x) => add_into(&mut grads[x.0], g.to_vec()),
            Op::Powf(x, p) => {
                let xs = self.value(*x).data();
                let (pk, pm1) = (T::of(*p), T::of(*p - 1.0));
                let dx = g
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &xv)| if gv == T::zero() { T::zero() } else { gv * pk * xv.powf(pm1) })
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Tanh(x) => {
                let dx = g.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t)).collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Exp(x) => {
                let dx = g.iter().zip(y).map(|(&gv, &e)| gv * e).collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Log(x) => {
                let xs = self.value(*x).data();
                let dx = g.iter().zip(xs).map(|(&gv, &xv)| gv / xv).collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::LogSigmoid(x) => {
                // d/dx log σ(x) = σ(-x)
                let xs = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &xv)| gv / (T::one() + xv.exp()))
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = axis_split(out_shape, *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        if log {
                            let gs: f64 = (0..n).map(|j| g[at(j)].f64()).sum();
                            for j in 0..n {
                                let p = y[at(j)].f64().exp();
                                dx[at(j)] = T::of(g[at(j)].f64() - p * gs);
                            }
                        } else {
                            let dot: f64 = (0..n).map(|j| g[at(j)].f64() * y[at(j)].f64()).sum();
                            for j in 0..n {
                                dx[at(j)] = T::of(y[at(j)].f64() * (g[at(j)].f64() - dot));
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) | Op::Variance(x, axis) => {
                let tx = self.value(*x);
                let (outer, n, inner) = axis_split(tx.shape(), *axis);
                let xs = tx.data();
                let mut dx = vec![T::zero(); tx.len()];
                let nf = n as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i].f64();
                        let at = |j: usize| (o * n + j) * inner + i;
                        match node.op {
                            Op::Sum(..) => (0..n).for_each(|j| dx[at(j)] = T::of(gv)),
                            Op::Mean(..) => (0..n).for_each(|j| dx[at(j)] = T::of(gv / nf)),
                            _ => {
                                let m = (0..n).map(|j| xs[at(j)].f64()).sum::<f64>() / nf;
                                for j in 0..n {
                                    dx[at(j)] = T::of(gv * 2.0 * (xs[at(j)].f64() - m) / nf);
                                }
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + n * inner]);
                        }
                        add_into(&mut grads[v.0], dv);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, n, inner) = axis_split(tx.shape(), *axis);
                let len = out_shape[*axis];
                let mut dx = vec![T::zero(); tx.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Gather { table, ids } => {
                let tt = self.value(*table);
                let d = tt.shape()[1];
                let mut dt = vec![T::zero(); tt.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[i * d + c] = dt[i * d + c] + g[r * d + c];
                    }
                }
                add_into(&mut grads[table.0], dt);
            }
        }
        Ok(())
    }
}

/// Paths of parameters that the graph actually touched.
pub fn touched_params<T: Scalar>(g: &Graph<'_, T>) -> BTreeSet<String> {
    g.param_nodes.keys().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn linear_map_gradient() {
        let mut ps = ParameterSet::new();
        ps.insert("w", t(&[2, 1], &[1.0, 1.0]));
        let mut g = Graph::new(&ps);
        let x = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = g.param("w").unwrap();
        let y = g.matmul(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_sum_gradient() {
        let mut ps = ParameterSet::new();
        ps.insert("x", t(&[1], &[0.0]));
        let mut g = Graph::new(&ps);
        let x = g.param("x").unwrap();
        let s = g.sigmoid(x).unwrap();
        let l = g.sum_all(s).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        assert!((grads.get("x").unwrap().item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut ps = ParameterSet::new();
        ps.insert("a", t(&[2], &[1.0, 2.0]));
        ps.insert("b", t(&[3], &[1.0, 2.0, 3.0]));
        let mut g = Graph::new(&ps);
        let a = g.param("a").unwrap();
        let _b = g.param("b").unwrap();
        let l = g.sum_all(a).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("b").unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn argmax_is_rejected_in_backward() {
        let mut ps = ParameterSet::new();
        ps.insert("x", t(&[3], &[0.1, 0.5, 0.2]));
        let mut g = Graph::new(&ps);
        let x = g.param("x").unwrap();
        let a = g.argmax(x).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
        let l = g.add(a, x).unwrap();
        let l = g.sum_all(l).unwrap();
        assert!(matches!(g.backward(l), Err(DiffError::NonDifferentiable { .. })));
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let ps = ParameterSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let a = g.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = g.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_intermediate_reports_node_path() {
        let ps = ParameterSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(t(&[1], &[0.0])).unwrap();
        let err = g.scoped("loss", |g| g.log(x)).unwrap_err();
        assert!(err.to_string().contains("loss/log"), "{err}");
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let ps = ParameterSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0])).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let xs = g.offset(x, 7.5).unwrap();
        let ys = g.softmax(xs, 1).unwrap();
        let v = g.value(y).to_vec();
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!(g.value(y).max_abs_diff(g.value(ys)) < 1e-12);
    }
}
