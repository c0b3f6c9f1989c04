use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f32),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f32,
    },
    Softmax(Var),
    LogSoftmax(Var),
    NormalizeRows(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::ClampMin(x, _)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::NormalizeRows(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Define-by-run operation record. Build one per forward pass, run
/// [`Graph::backward`] once, then drop it.
#[derive(Debug)]
pub struct Graph<T = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    /// An empty graph; `Graph::<f64>::default()` gives a double-precision one.
    fn default() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            *shape.last().unwrap(),
        ),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        &self.nodes[v.idx]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// First element; meant for scalar losses.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).data[0]
    }

    /// Copies a node out as a frozen tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.iter().map(|v| v.as_f32()).collect()).expect("graph nodes hold valid shapes")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Binds a tensor as a leaf. Its trainable flag decides whether backward
    /// produces a gradient for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_raw(Node {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| T::of_f32(v)).collect(),
            op: Op::Leaf,
            trainable: t.is_trainable(),
            needs_grad: t.is_trainable(),
        })
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Binds values already in the graph's element type.
    pub fn leaf_values(&mut self, shape: Vec<usize>, data: Vec<T>, trainable: bool) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(self.push_raw(Node {
            shape,
            data,
            op: Op::Leaf,
            trainable,
            needs_grad: trainable,
        }))
    }

    fn push_raw(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        for v in op.inputs() {
            if v.graph != self.id || v.idx >= self.nodes.len() {
                return Err(Error::Usage("operand is not attached to this graph".into()));
            }
        }
        let (shape, data) = self.eval(&op)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.idx].needs_grad);
        Ok(self.push_raw(Node {
            shape,
            data,
            op,
            trainable: false,
            needs_grad,
        }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.idx].shape, &self.nodes[b.idx].shape);
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> (Vec<usize>, Vec<T>) {
        let (na, nb) = (&self.nodes[a.idx], &self.nodes[b.idx]);
        let data = na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect();
        (na.shape.clone(), data)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> (Vec<usize>, Vec<T>) {
        let n = &self.nodes[x.idx];
        (n.shape.clone(), n.data.iter().map(|&v| f(v)).collect())
    }

    /// Forward evaluation of an op from the recorded inputs. Shared by
    /// [`Graph::push`] and [`Graph::replay_matches`].
    fn eval(&self, op: &Op) -> Result<(Vec<usize>, Vec<T>)> {
        let nodes = &self.nodes;
        Ok(match op {
            Op::Leaf => return Err(Error::Usage("leaves are not evaluated".into())),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.idx].shape, &nodes[b.idx].shape);
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(Error::dim("matmul", sa, sb));
                }
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                (
                    vec![r, c],
                    kernels::matmul(&nodes[a.idx].data, &nodes[b.idx].data, r, k, c),
                )
            }
            Op::Transpose(x) => {
                let s = &nodes[x.idx].shape;
                if s.len() != 2 {
                    return Err(Error::Shape(format!("transpose needs a matrix, got {s:?}")));
                }
                (vec![s[1], s[0]], kernels::transpose(&nodes[x.idx].data, s[0], s[1]))
            }
            Op::Add(a, b) => {
                self.same_shape("add", *a, *b)?;
                self.zip_map(*a, *b, |x, y| x + y)
            }
            Op::Sub(a, b) => {
                self.same_shape("sub", *a, *b)?;
                self.zip_map(*a, *b, |x, y| x - y)
            }
            Op::Mul(a, b) => {
                self.same_shape("mul", *a, *b)?;
                self.zip_map(*a, *b, |x, y| x * y)
            }
            Op::Scale(x, s) => {
                let s = T::of_f32(*s);
                self.map(*x, |v| v * s)
            }
            Op::Gelu(x) => self.map(*x, kernels::gelu),
            Op::Exp(x) => self.map(*x, T::exp),
            Op::Log(x) => self.map(*x, T::ln),
            Op::ClampMin(x, lo) => {
                let lo = T::of_f32(*lo);
                self.map(*x, |v| v.max(lo))
            }
            Op::AddRow(x, b) => {
                let (sx, sb) = (&nodes[x.idx].shape, &nodes[b.idx].shape);
                let (_, d) = as_matrix(sx);
                if nodes[b.idx].data.len() != d {
                    return Err(Error::dim("add_row", sx, sb));
                }
                let bias = &nodes[b.idx].data;
                let data = nodes[x.idx]
                    .data
                    .chunks(d)
                    .flat_map(|row| row.iter().zip(bias).map(|(&v, &b)| v + b))
                    .collect();
                (sx.clone(), data)
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let sx = &nodes[x.idx].shape;
                let (r, d) = as_matrix(sx);
                for p in [gain, bias] {
                    if nodes[p.idx].data.len() != d {
                        return Err(Error::dim("layernorm", sx, &nodes[p.idx].shape));
                    }
                }
                if *eps <= 0.0 {
                    return Err(Error::Config("layernorm eps must be positive".into()));
                }
                (
                    sx.clone(),
                    kernels::layernorm(
                        &nodes[x.idx].data,
                        &nodes[gain.idx].data,
                        &nodes[bias.idx].data,
                        r,
                        d,
                        *eps,
                    ),
                )
            }
            Op::Softmax(x) | Op::LogSoftmax(x) => {
                let n = &nodes[x.idx];
                if n.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("softmax input is not finite".into()));
                }
                let (_, d) = as_matrix(&n.shape);
                let data = if matches!(op, Op::Softmax(_)) {
                    kernels::softmax_rows(&n.data, d)
                } else {
                    kernels::log_softmax_rows(&n.data, d)
                };
                (n.shape.clone(), data)
            }
            Op::NormalizeRows(x) => {
                let n = &nodes[x.idx];
                let (_, d) = as_matrix(&n.shape);
                let norms = kernels::row_norms(&n.data, d);
                if let Some(i) = norms.iter().position(|&v| v == T::zero() || !v.is_finite()) {
                    return Err(Error::Numeric(format!("row {i} has zero or non-finite norm")));
                }
                let data = n
                    .data
                    .chunks(d)
                    .zip(&norms)
                    .flat_map(|(row, &nm)| row.iter().map(move |&v| v / nm))
                    .collect();
                (n.shape.clone(), data)
            }
            Op::Concat { parts, axis } => {
                let first = parts
                    .first()
                    .ok_or_else(|| Error::Usage("concat of zero parts".into()))?;
                let s0 = &nodes[first.idx].shape;
                if *axis >= s0.len() {
                    return Err(Error::Usage(format!("concat axis {axis} out of range for {s0:?}")));
                }
                let mut total = 0;
                for p in parts {
                    let s = &nodes[p.idx].shape;
                    let compatible = s.len() == s0.len()
                        && s.iter().zip(s0).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                    if !compatible {
                        return Err(Error::dim("concat", s0, s));
                    }
                    total += s[*axis];
                }
                let mut shape = s0.clone();
                shape[*axis] = total;
                let (outer, _, inner) = split_axis(s0, *axis);
                let mut data = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for p in parts {
                        let n = &nodes[p.idx];
                        let chunk = n.shape[*axis] * inner;
                        data.extend_from_slice(&n.data[o * chunk..(o + 1) * chunk]);
                    }
                }
                (shape, data)
            }
            Op::Slice { x, axis, start, len } => {
                let n = &nodes[x.idx];
                if *axis >= n.shape.len() || *len == 0 || start + len > n.shape[*axis] {
                    return Err(Error::Shape(format!(
                        "slice [{start}, {}) on axis {axis} of {:?}",
                        start + len,
                        n.shape
                    )));
                }
                let (outer, ext, inner) = split_axis(&n.shape, *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    data.extend_from_slice(&n.data[base..base + len * inner]);
                }
                let mut shape = n.shape.clone();
                shape[*axis] = *len;
                (shape, data)
            }
            Op::GatherRows { table, ids } => {
                let n = &nodes[table.idx];
                if n.shape.len() != 2 || ids.is_empty() {
                    return Err(Error::Shape(format!("gather_rows from {:?}", n.shape)));
                }
                let d = n.shape[1];
                let mut data = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    if i >= n.shape[0] {
                        return Err(Error::Usage(format!("row {i} out of range for {:?}", n.shape)));
                    }
                    data.extend_from_slice(&n.data[i * d..(i + 1) * d]);
                }
                (vec![ids.len(), d], data)
            }
            Op::Sum(x) => (vec![1], vec![nodes[x.idx].data.iter().copied().sum()]),
            Op::Mean(x) => {
                let n = &nodes[x.idx];
                (vec![1], vec![n.data.iter().copied().sum::<T>() / T::of_f32(n.data.len() as f32)])
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        self.push(Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Log(x))
    }

    /// `max(x, lo)`; the gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, x: Var, lo: f32) -> Result<Var> {
        self.push(Op::ClampMin(x, lo))
    }

    /// Adds a length-`d` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRow(x, bias))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    /// Softmax over `axis`, which must be the last one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.node(x).shape.len();
        if axis + 1 != rank {
            return Err(Error::Usage(format!(
                "softmax supports the last axis only (axis {axis}, rank {rank})"
            )));
        }
        self.push(Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(x))
    }

    /// Scales every row to unit Euclidean norm; zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::NormalizeRows(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.push(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice { x, axis, start, len })
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::GatherRows {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    /// Recomputes every non-leaf node from its recorded inputs and checks the
    /// result is bitwise identical to what was recorded.
    pub fn replay_matches(&self) -> bool {
        self.nodes.iter().all(|n| match n.op {
            Op::Leaf => true,
            _ => match self.eval(&n.op) {
                Ok((shape, data)) => {
                    shape == n.shape
                        && data.len() == n.data.len()
                        && data.iter().zip(&n.data).all(|(a, b)| a.same_bits(*b))
                }
                Err(_) => false,
            },
        })
    }

    /// Reverse pass from a scalar `loss`. Nodes are visited in exact reverse
    /// recording order; only nodes downstream of a trainable leaf are touched.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.graph != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Usage("loss is not attached to this graph".into()));
        }
        if self.nodes[loss.idx].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.idx].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(vec![T::one()]);
        for idx in (0..=loss.idx).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.vjp(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if n.trainable {
                    Some(grads[i].take().unwrap_or_else(|| vec![T::zero(); n.data.len()]))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads: leaves,
        })
    }

    fn vjp(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !nodes[v.idx].needs_grad {
                return;
            }
            match &mut grads[v.idx] {
                Some(buf) => {
                    for (b, &c) in buf.iter_mut().zip(&contrib) {
                        *b += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |v: &Var| nodes[v.idx].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.idx].shape, &nodes[b.idx].shape);
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                if needs(a) {
                    let bt = kernels::transpose(&nodes[b.idx].data, k, c);
                    acc(*a, kernels::matmul(g, &bt, r, c, k));
                }
                if needs(b) {
                    let at = kernels::transpose(&nodes[a.idx].data, r, k);
                    acc(*b, kernels::matmul(&at, g, k, r, c));
                }
            }
            Op::Transpose(x) => {
                let s = &nodes[x.idx].shape;
                acc(*x, kernels::transpose(g, s[1], s[0]));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (&nodes[a.idx].data, &nodes[b.idx].data);
                if needs(a) {
                    acc(*a, g.iter().zip(db).map(|(&g, &y)| g * y).collect());
                }
                if needs(b) {
                    acc(*b, g.iter().zip(da).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(x, s) => {
                let s = T::of_f32(*s);
                acc(*x, g.iter().map(|&v| v * s).collect())
            }
            Op::Gelu(x) => acc(
                *x,
                g.iter()
                    .zip(&nodes[x.idx].data)
                    .map(|(&g, &v)| g * kernels::gelu_grad(v))
                    .collect(),
            ),
            Op::Exp(x) => acc(*x, g.iter().zip(&node.data).map(|(&g, &y)| g * y).collect()),
            Op::Log(x) => acc(
                *x,
                g.iter().zip(&nodes[x.idx].data).map(|(&g, &v)| g / v).collect(),
            ),
            Op::ClampMin(x, lo) => {
                let lo = T::of_f32(*lo);
                acc(
                    *x,
                    g.iter()
                        .zip(&nodes[x.idx].data)
                        .map(|(&g, &v)| if v > lo { g } else { T::zero() })
                        .collect(),
                )
            }
            Op::AddRow(x, b) => {
                let d = nodes[b.idx].data.len();
                if needs(b) {
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (s, &v) in db.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(*b, db);
                }
                acc(*x, g.to_vec());
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xd = &nodes[x.idx].data;
                let gd = &nodes[gain.idx].data;
                let (r, d) = as_matrix(&nodes[x.idx].shape);
                let stats = kernels::row_stats(xd, r, d, *eps);
                let mut dx = vec![T::zero(); r * d];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (i, &(mean, rstd)) in stats.iter().enumerate() {
                    let (mut m1, mut m2) = (T::zero(), T::zero());
                    for j in 0..d {
                        xhat[j] = (xd[i * d + j] - mean) * rstd;
                        let gij = g[i * d + j];
                        dxhat[j] = gij * gd[j];
                        dgain[j] += gij * xhat[j];
                        dbias[j] += gij;
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= T::of_f32(d as f32);
                    m2 /= T::of_f32(d as f32);
                    for j in 0..d {
                        dx[i * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Softmax(x) => {
                let (_, d) = as_matrix(&node.shape);
                let mut dx = Vec::with_capacity(g.len());
                for (yr, gr) in node.data.chunks(d).zip(g.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                acc(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let (_, d) = as_matrix(&node.shape);
                let mut dx = Vec::with_capacity(g.len());
                for (yr, gr) in node.data.chunks(d).zip(g.chunks(d)) {
                    let total: T = gr.iter().copied().sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &g)| g - y.exp() * total));
                }
                acc(*x, dx);
            }
            Op::NormalizeRows(x) => {
                let (_, d) = as_matrix(&node.shape);
                let norms = kernels::row_norms(&nodes[x.idx].data, d);
                let mut dx = Vec::with_capacity(g.len());
                for ((yr, gr), nm) in node.data.chunks(d).zip(g.chunks(d)).zip(&norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &g)| (g - y * dot) / *nm));
                }
                acc(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                let total = node.shape[*axis] * inner;
                for p in parts {
                    let ext = nodes[p.idx].shape[*axis];
                    if needs(p) {
                        let chunk = ext * inner;
                        let mut part = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset * inner;
                            part.extend_from_slice(&g[base..base + chunk]);
                        }
                        acc(*p, part);
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let src = &nodes[x.idx];
                let (outer, ext, inner) = split_axis(&src.shape, *axis);
                let mut dx = vec![T::zero(); src.data.len()];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    let chunk = len * inner;
                    dx[base..base + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
                }
                acc(*x, dx);
            }
            Op::GatherRows { table, ids } => {
                let src = &nodes[table.idx];
                let d = src.shape[1];
                let mut dt = vec![T::zero(); src.data.len()];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[k * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; nodes[x.idx].data.len()]),
            Op::Mean(x) => {
                let n = nodes[x.idx].data.len();
                acc(*x, vec![g[0] / T::of_f32(n as f32); n]);
            }
        }
    }
}

/// Gradients for the trainable leaves of one graph.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    graph: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a trainable leaf (all zeros when the loss does not depend
    /// on it); `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Installs the gradient of `v` on `t`. Frozen tensors receive nothing.
    pub fn write_to(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.get(v) {
            t.set_grad(g.iter().map(|v| v.as_f32()).collect());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut g = Graph::new();
        let i = g.leaf(&t(vec![2, 2], vec![1., 0., 0., 1.]));
        let b = g.leaf(&t(vec![2, 2], vec![3., 4., 5., 6.]));
        let p = g.matmul(i, b).unwrap();
        assert_eq!(g.value(p), &[3., 4., 5., 6.]);
        let a = g.leaf(&t(vec![1, 2], vec![1., 2.]));
        let c = g.leaf(&t(vec![2, 1], vec![3., 4.]));
        let p = g.matmul(a, c).unwrap();
        assert_eq!(g.value(p), &[11.]);
        assert_eq!(g.shape(p), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![2, 3], vec![0.; 6]));
        let b = g.leaf(&t(vec![2, 3], vec![0.; 6]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn elementwise_cases() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![2], vec![1., 2.]));
        let b = g.leaf(&t(vec![2], vec![3., 4.]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s), &[4., 6.]);
        let c = g.leaf(&t(vec![2], vec![2., 4.]));
        let h = g.scale(c, 0.5).unwrap();
        assert_eq!(g.value(h), &[1., 2.]);
        let z = g.leaf(&t(vec![1], vec![0.]));
        let ge = g.gelu(z).unwrap();
        assert_eq!(g.value(ge), &[0.]);
        let bad = g.leaf(&t(vec![3], vec![0.; 3]));
        assert!(matches!(g.add(a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn layernorm_cases() {
        let mut g = Graph::new();
        let gain = g.leaf(&t(vec![3], vec![1.; 3]));
        let bias = g.leaf(&t(vec![3], vec![0.; 3]));
        let x = g.leaf(&t(vec![1, 3], vec![1., 1., 1.]));
        let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0., 0., 0.]);

        let gain = g.leaf(&t(vec![2], vec![1.; 2]));
        let bias = g.leaf(&t(vec![2], vec![0.; 2]));
        let x = g.leaf(&t(vec![1, 2], vec![1., -1.]));
        let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-4);
        assert!((g.value(y)[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![2], vec![0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
        let x = g.leaf(&t(vec![1], vec![f32::NAN]));
        assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
        let x = g.leaf(&t(vec![2, 2], vec![0.; 4]));
        assert!(matches!(g.softmax(x, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn concat_and_slice() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![1, 1], vec![1.]));
        let b = g.leaf(&t(vec![1, 1], vec![2.]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[1., 2.]);

        let x = g.leaf(&t(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let only = g.concat(&[x], 1).unwrap();
        assert_eq!(g.value(only), g.value(x));

        let y = g.leaf(&t(vec![2, 2], vec![7., 8., 9., 10.]));
        let xy = g.concat(&[x, y], 1).unwrap();
        assert_eq!(g.value(xy), &[1., 2., 3., 7., 8., 4., 5., 6., 9., 10.]);
        let back_x = g.slice(xy, 1, 0, 3).unwrap();
        let back_y = g.slice(xy, 1, 3, 2).unwrap();
        assert_eq!(g.value(back_x), g.value(x));
        assert_eq!(g.value(back_y), g.value(y));

        let bad = g.leaf(&t(vec![3, 2], vec![0.; 6]));
        assert!(matches!(g.concat(&[x, bad], 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_square() {
        let x = t(vec![1], vec![3.]).with_trainable(true);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[6.]);
    }

    #[test]
    fn backward_unreachable_trainable_gets_zeros() {
        let x = t(vec![2], vec![1., 2.]);
        let w = t(vec![3], vec![1., 1., 1.]).with_trainable(true);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let wv = g.leaf(&w);
        let loss = g.sum(xv).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(wv).unwrap(), &[0., 0., 0.]);
        assert!(grads.get(xv).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![2], vec![1., 2.]).with_trainable(true));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
        let mut other = Graph::new();
        let y = other.leaf(&Tensor::scalar(1.0));
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_leaf_never_gets_grad() {
        let mut frozen = t(vec![2], vec![1., 2.]);
        let mut g = Graph::new();
        let v = g.leaf(&frozen);
        let s = g.mul(v, v).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        grads.write_to(v, &mut frozen);
        assert!(frozen.grad().is_none());
    }

    #[test]
    fn backward_leaves_forward_values_untouched() {
        let w = t(vec![2, 2], vec![0.5, -1., 2., 0.25]).with_trainable(true);
        let mut g = Graph::new();
        let wv = g.leaf(&w);
        let x = g.leaf(&t(vec![1, 2], vec![1., 3.]));
        let h = g.matmul(x, wv).unwrap();
        let h = g.gelu(h).unwrap();
        let p = g.softmax(h, 1).unwrap();
        let loss = g.sum(p).unwrap();
        let before: Vec<Vec<u32>> = (0..g.len())
            .map(|i| g.nodes[i].data.iter().map(|v| v.to_bits()).collect())
            .collect();
        g.backward(loss).unwrap();
        let after: Vec<Vec<u32>> = (0..g.len())
            .map(|i| g.nodes[i].data.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
        assert!(g.replay_matches());
    }
}
