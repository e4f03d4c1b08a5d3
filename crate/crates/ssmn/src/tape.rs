//! Reverse-mode differentiation over a linear tape of primitive ops.
//!
//! The tape owns every intermediate tensor. Ops are appended in execution
//! order, so each node's inputs always precede it; backward is a single
//! reverse sweep over the subgraph reachable from the loss node.

use crate::error::{Result, SsmnError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    AddScalar(f64),
    MatMul,
    Dot,
    /// (m,n) matrix plus an (n,) vector broadcast to every row.
    AddRowVec,
    /// Stack (1,n) rows into an (m,n) matrix.
    ConcatRows,
    /// Concatenate 1-D tensors.
    Concat1,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    Relu,
    Tanh,
    Sigmoid,
    /// Row-wise stabilized softmax; 1-D input treated as a single row.
    SoftmaxRows,
    Log,
    SumAll,
    /// Sum of the elements at the given flat indices (duplicates allowed).
    GatherSum(Vec<usize>),
    Transpose,
    Reshape(Vec<usize>),
    /// 3x3 convolution, padding 1, stride 1. Inputs: x (N,C,H,W), w (OC,C,3,3), b (OC).
    Conv2d3x3,
    /// 2x2 max pool, stride 2; ties break toward the lowest flat index.
    MaxPool2x2,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<VarId>,
    value: Tensor,
    /// Op-specific metadata recorded at forward time (max-pool argmax).
    aux: Option<Vec<usize>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-variable gradients produced by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: VarId) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push(Op::Leaf, vec![], t, None)
    }

    fn push(&mut self, op: Op, inputs: Vec<VarId>, value: Tensor, aux: Option<Vec<usize>>) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
        });
        id
    }

    fn apply(&mut self, op: Op, inputs: Vec<VarId>) -> Result<VarId> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, aux) = eval_op(&op, &tensors)?;
        value.assert_finite(&format!("{op:?}"))?;
        Ok(self.push(op, inputs, value, aux))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Add, vec![a, b])
    }
    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Sub, vec![a, b])
    }
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Mul, vec![a, b])
    }
    pub fn scalar_mul(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.apply(Op::ScalarMul(c), vec![a])
    }
    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.apply(Op::AddScalar(c), vec![a])
    }
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::MatMul, vec![a, b])
    }
    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Dot, vec![a, b])
    }
    pub fn add_row_vec(&mut self, m: VarId, v: VarId) -> Result<VarId> {
        self.apply(Op::AddRowVec, vec![m, v])
    }
    pub fn concat_rows(&mut self, rows: &[VarId]) -> Result<VarId> {
        self.apply(Op::ConcatRows, rows.to_vec())
    }
    pub fn concat1(&mut self, parts: &[VarId]) -> Result<VarId> {
        self.apply(Op::Concat1, parts.to_vec())
    }
    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        self.apply(Op::SliceRows { start, len }, vec![a])
    }
    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        self.apply(Op::SliceCols { start, len }, vec![a])
    }
    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Relu, vec![a])
    }
    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Tanh, vec![a])
    }
    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Sigmoid, vec![a])
    }
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::SoftmaxRows, vec![a])
    }
    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Log, vec![a])
    }
    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::SumAll, vec![a])
    }
    pub fn gather_sum(&mut self, a: VarId, indices: Vec<usize>) -> Result<VarId> {
        self.apply(Op::GatherSum(indices), vec![a])
    }
    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        self.apply(Op::Transpose, vec![a])
    }
    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        self.apply(Op::Reshape(shape.to_vec()), vec![a])
    }
    pub fn conv2d_3x3(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Conv2d3x3, vec![x, w, b])
    }
    pub fn max_pool_2x2(&mut self, x: VarId) -> Result<VarId> {
        self.apply(Op::MaxPool2x2, vec![x])
    }

    /// Backpropagate from a scalar loss node. Returns gradients for every
    /// variable reachable from the loss; unreachable variables have none.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(SsmnError::Shape(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        // Reachable-ancestor mask via stack walk from the loss.
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            for inp in &self.nodes[i].inputs {
                if !reachable[inp.0] {
                    stack.push(inp.0);
                }
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if !reachable[i] || grads[i].is_none() {
                continue;
            }
            let gout = grads[i].take().unwrap();
            let node = &self.nodes[i];
            self.propagate(node, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let input_tensor = |k: usize| &self.nodes[node.inputs[k].0].value;
        let mut add_to = |k: usize, contrib: Vec<f64>| {
            let id = node.inputs[k].0;
            let n = self.nodes[id].value.len();
            let slot = grads[id].get_or_insert_with(|| vec![0.0; n]);
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                add_to(0, gout.to_vec());
                add_to(1, gout.to_vec());
            }
            Op::Sub => {
                add_to(0, gout.to_vec());
                add_to(1, gout.iter().map(|g| -g).collect());
            }
            Op::Mul => {
                let a = input_tensor(0).data();
                let b = input_tensor(1).data();
                add_to(0, gout.iter().zip(b).map(|(g, x)| g * x).collect());
                add_to(1, gout.iter().zip(a).map(|(g, x)| g * x).collect());
            }
            Op::ScalarMul(c) => {
                add_to(0, gout.iter().map(|g| g * c).collect());
            }
            Op::AddScalar(_) => {
                add_to(0, gout.to_vec());
            }
            Op::MatMul => {
                let a = input_tensor(0);
                let b = input_tensor(1);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // dA[m,k] = sum_n gout[m,n] * B[k,n]
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..k {
                        let mut s = 0.0;
                        let grow = &gout[i * n..(i + 1) * n];
                        let brow = &b.data()[j * n..(j + 1) * n];
                        for t in 0..n {
                            s += grow[t] * brow[t];
                        }
                        da[i * k + j] = s;
                    }
                }
                // dB[k,n] = sum_m A[m,k] * gout[m,n]
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..k {
                        let aij = a.data()[i * k + j];
                        if aij == 0.0 {
                            continue;
                        }
                        let grow = &gout[i * n..(i + 1) * n];
                        let drow = &mut db[j * n..(j + 1) * n];
                        for t in 0..n {
                            drow[t] += aij * grow[t];
                        }
                    }
                }
                add_to(0, da);
                add_to(1, db);
            }
            Op::Dot => {
                let a = input_tensor(0).data();
                let b = input_tensor(1).data();
                let g = gout[0];
                add_to(0, b.iter().map(|x| g * x).collect());
                add_to(1, a.iter().map(|x| g * x).collect());
            }
            Op::AddRowVec => {
                let v = input_tensor(1);
                let n = v.len();
                add_to(0, gout.to_vec());
                let mut dv = vec![0.0; n];
                for row in gout.chunks(n) {
                    for (d, g) in dv.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                add_to(1, dv);
            }
            Op::ConcatRows => {
                let n = input_tensor(0).len();
                for (k, chunk) in gout.chunks(n).enumerate() {
                    add_to(k, chunk.to_vec());
                }
            }
            Op::Concat1 => {
                let mut off = 0;
                for k in 0..node.inputs.len() {
                    let n = input_tensor(k).len();
                    add_to(k, gout[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceRows { start, len } => {
                let a = input_tensor(0);
                let cols = a.shape()[1];
                let mut da = vec![0.0; a.len()];
                da[start * cols..(start + len) * cols].copy_from_slice(gout);
                add_to(0, da);
            }
            Op::SliceCols { start, len } => {
                let a = input_tensor(0);
                let (rows, cols) = (a.shape()[0], a.shape()[1]);
                let mut da = vec![0.0; a.len()];
                for r in 0..rows {
                    for c in 0..*len {
                        da[r * cols + start + c] = gout[r * len + c];
                    }
                }
                add_to(0, da);
            }
            Op::Relu => {
                let a = input_tensor(0).data();
                add_to(
                    0,
                    gout.iter()
                        .zip(a)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Tanh => {
                let y = node.value.data();
                add_to(0, gout.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect());
            }
            Op::Sigmoid => {
                let y = node.value.data();
                add_to(0, gout.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::SoftmaxRows => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for c in 0..cols {
                        da[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                add_to(0, da);
            }
            Op::Log => {
                let a = input_tensor(0).data();
                add_to(0, gout.iter().zip(a).map(|(g, x)| g / x).collect());
            }
            Op::SumAll => {
                let n = input_tensor(0).len();
                add_to(0, vec![gout[0]; n]);
            }
            Op::GatherSum(indices) => {
                let n = input_tensor(0).len();
                let mut da = vec![0.0; n];
                for &idx in indices {
                    da[idx] += gout[0];
                }
                add_to(0, da);
            }
            Op::Transpose => {
                let a = input_tensor(0);
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gout[j * m + i];
                    }
                }
                add_to(0, da);
            }
            Op::Reshape(_) => {
                add_to(0, gout.to_vec());
            }
            Op::Conv2d3x3 => {
                let x = input_tensor(0);
                let w = input_tensor(1);
                let (dx, dw, db) = conv2d_backward(x, w, gout);
                add_to(0, dx);
                add_to(1, dw);
                add_to(2, db);
            }
            Op::MaxPool2x2 => {
                let n = input_tensor(0).len();
                let argmax = node.aux.as_ref().expect("maxpool aux");
                let mut da = vec![0.0; n];
                for (g, &idx) in gout.iter().zip(argmax) {
                    da[idx] += g;
                }
                add_to(0, da);
            }
        }
        Ok(())
    }

    /// Re-run every op from its recorded inputs and compare bit-for-bit.
    pub fn verify_replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let tensors: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let (value, _) = eval_op(&node.op, &tensors)?;
            if value.data() != node.value.data() {
                return Err(SsmnError::Invalid(format!(
                    "replay mismatch at node {i} ({:?})",
                    node.op
                )));
            }
        }
        Ok(())
    }
}

fn shape2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(SsmnError::Shape(format!(
            "{what} wants a 2-D tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Forward evaluation of a primitive; shared by the tape builder and replay.
pub(crate) fn eval_op(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Option<Vec<usize>>)> {
    let t = |v: Tensor| Ok((v, None));
    match op {
        Op::Leaf => Err(SsmnError::Invalid("cannot eval a leaf".into())),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(SsmnError::Shape(format!(
                    "{op:?}: shapes {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            t(Tensor::from_vec(a.shape(), data)?)
        }
        Op::ScalarMul(c) => t(Tensor::from_vec(
            inputs[0].shape(),
            inputs[0].data().iter().map(|x| x * c).collect(),
        )?),
        Op::AddScalar(c) => t(Tensor::from_vec(
            inputs[0].shape(),
            inputs[0].data().iter().map(|x| x + c).collect(),
        )?),
        Op::MatMul => {
            let (m, k) = shape2(inputs[0], "matmul lhs")?;
            let (k2, n) = shape2(inputs[1], "matmul rhs")?;
            if k != k2 {
                return Err(SsmnError::Shape(format!(
                    "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                    inputs[0].shape(),
                    inputs[1].shape()
                )));
            }
            let mut out = vec![0.0; m * n];
            let a = inputs[0].data();
            let b = inputs[1].data();
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (j, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[j * n..(j + 1) * n];
                    for x in 0..n {
                        orow[x] += av * brow[x];
                    }
                }
            }
            t(Tensor::from_vec(&[m, n], out)?)
        }
        Op::Dot => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.len() != b.len() {
                return Err(SsmnError::Shape(format!(
                    "dot: lengths {} vs {}",
                    a.len(),
                    b.len()
                )));
            }
            let s = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            t(Tensor::scalar(s))
        }
        Op::AddRowVec => {
            let (m, n) = shape2(inputs[0], "add_row_vec matrix")?;
            if inputs[1].len() != n {
                return Err(SsmnError::Shape(format!(
                    "add_row_vec: vector length {} vs {} columns",
                    inputs[1].len(),
                    n
                )));
            }
            let v = inputs[1].data();
            let data = inputs[0]
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(v).map(|(x, y)| x + y))
                .collect();
            t(Tensor::from_vec(&[m, n], data)?)
        }
        Op::ConcatRows => {
            let n = inputs[0].len();
            let mut data = Vec::with_capacity(n * inputs.len());
            for inp in inputs {
                if inp.len() != n {
                    return Err(SsmnError::Shape("concat_rows: ragged rows".into()));
                }
                data.extend_from_slice(inp.data());
            }
            t(Tensor::from_vec(&[inputs.len(), n], data)?)
        }
        Op::Concat1 => {
            let mut data = Vec::new();
            for inp in inputs {
                data.extend_from_slice(inp.data());
            }
            let n = data.len();
            t(Tensor::from_vec(&[n], data)?)
        }
        Op::SliceRows { start, len } => {
            let (m, n) = shape2(inputs[0], "slice_rows")?;
            if start + len > m {
                return Err(SsmnError::Shape(format!(
                    "slice_rows: rows {start}..{} out of {m}",
                    start + len
                )));
            }
            t(Tensor::from_vec(
                &[*len, n],
                inputs[0].data()[start * n..(start + len) * n].to_vec(),
            )?)
        }
        Op::SliceCols { start, len } => {
            let (m, n) = shape2(inputs[0], "slice_cols")?;
            if start + len > n {
                return Err(SsmnError::Shape(format!(
                    "slice_cols: cols {start}..{} out of {n}",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(m * len);
            for r in 0..m {
                data.extend_from_slice(&inputs[0].data()[r * n + start..r * n + start + len]);
            }
            t(Tensor::from_vec(&[m, *len], data)?)
        }
        Op::Relu => t(Tensor::from_vec(
            inputs[0].shape(),
            inputs[0].data().iter().map(|x| x.max(0.0)).collect(),
        )?),
        Op::Tanh => t(Tensor::from_vec(
            inputs[0].shape(),
            inputs[0].data().iter().map(|x| x.tanh()).collect(),
        )?),
        Op::Sigmoid => t(Tensor::from_vec(
            inputs[0].shape(),
            inputs[0].data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        )?),
        Op::SoftmaxRows => {
            let cols = *inputs[0].shape().last().ok_or_else(|| {
                SsmnError::Shape("softmax on zero-rank tensor".into())
            })?;
            let mut data = Vec::with_capacity(inputs[0].len());
            for row in inputs[0].data().chunks(cols) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                data.extend(exps.iter().map(|e| e / z));
            }
            t(Tensor::from_vec(inputs[0].shape(), data)?)
        }
        Op::Log => t(Tensor::from_vec(
            inputs[0].shape(),
            inputs[0].data().iter().map(|x| x.ln()).collect(),
        )?),
        Op::SumAll => t(Tensor::scalar(inputs[0].data().iter().sum())),
        Op::GatherSum(indices) => {
            let n = inputs[0].len();
            let mut s = 0.0;
            for &idx in indices {
                if idx >= n {
                    return Err(SsmnError::Shape(format!(
                        "gather_sum: index {idx} out of {n}"
                    )));
                }
                s += inputs[0].data()[idx];
            }
            t(Tensor::scalar(s))
        }
        Op::Transpose => {
            let (m, n) = shape2(inputs[0], "transpose")?;
            let a = inputs[0].data();
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = a[i * n + j];
                }
            }
            t(Tensor::from_vec(&[n, m], data)?)
        }
        Op::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != inputs[0].len() {
                return Err(SsmnError::Shape(format!(
                    "reshape: {:?} -> {:?}",
                    inputs[0].shape(),
                    shape
                )));
            }
            t(Tensor::from_vec(shape, inputs[0].data().to_vec())?)
        }
        Op::Conv2d3x3 => {
            let (value, _) = conv2d_forward(inputs[0], inputs[1], inputs[2])?;
            t(value)
        }
        Op::MaxPool2x2 => max_pool_forward(inputs[0]).map(|(v, aux)| (v, Some(aux))),
    }
}

fn conv_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(SsmnError::Shape(format!(
            "conv2d wants x (N,C,H,W) and w (OC,C,3,3), got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oc = w.shape()[0];
    if w.shape()[1] != c || w.shape()[2] != 3 || w.shape()[3] != 3 {
        return Err(SsmnError::Shape(format!(
            "conv2d kernel shape {:?} does not match input channels {c}",
            w.shape()
        )));
    }
    Ok((n, c, h, wd, oc))
}

/// im2col for one sample: (H*W) rows, (C*9) cols, zero padding 1.
fn im2col(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut col = vec![0.0; h * w * c * 9];
    let row_len = c * 9;
    for oy in 0..h {
        for ox in 0..w {
            let base = (oy * w + ox) * row_len;
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for ky in 0..3 {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = ox as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[base + ch * 9 + ky * 3 + kx] = plane[iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, ())> {
    let (n, c, h, wd, oc) = conv_dims(x, w)?;
    if b.len() != oc {
        return Err(SsmnError::Shape(format!(
            "conv2d bias length {} vs {oc} output channels",
            b.len()
        )));
    }
    let hw = h * wd;
    let k = c * 9;
    let mut out = vec![0.0; n * oc * hw];
    for s in 0..n {
        let col = im2col(&x.data()[s * c * hw..(s + 1) * c * hw], c, h, wd);
        let dst = &mut out[s * oc * hw..(s + 1) * oc * hw];
        // out[o, p] = sum_k w[o,k] * col[p,k] + b[o]
        for o in 0..oc {
            let wrow = &w.data()[o * k..(o + 1) * k];
            let bias = b.data()[o];
            let orow = &mut dst[o * hw..(o + 1) * hw];
            for p in 0..hw {
                let crow = &col[p * k..(p + 1) * k];
                let mut acc = bias;
                for t in 0..k {
                    acc += wrow[t] * crow[t];
                }
                orow[p] = acc;
            }
        }
    }
    Ok((Tensor::from_vec(&[n, oc, h, wd], out)?, ()))
}

fn conv2d_backward(x: &Tensor, w: &Tensor, gout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, wd, oc) = conv_dims(x, w).expect("conv dims checked at forward");
    let hw = h * wd;
    let k = c * 9;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; oc];
    for s in 0..n {
        let col = im2col(&x.data()[s * c * hw..(s + 1) * c * hw], c, h, wd);
        let g = &gout[s * oc * hw..(s + 1) * oc * hw];
        // dW[o,k] += sum_p g[o,p] * col[p,k]; db[o] += sum_p g[o,p]
        for o in 0..oc {
            let grow = &g[o * hw..(o + 1) * hw];
            let dwrow = &mut dw[o * k..(o + 1) * k];
            let mut bs = 0.0;
            for p in 0..hw {
                let gv = grow[p];
                bs += gv;
                if gv == 0.0 {
                    continue;
                }
                let crow = &col[p * k..(p + 1) * k];
                for t in 0..k {
                    dwrow[t] += gv * crow[t];
                }
            }
            db[o] += bs;
        }
        // dcol[p,k] = sum_o g[o,p] * w[o,k], then scatter-add back (col2im).
        let mut dcol = vec![0.0; hw * k];
        for o in 0..oc {
            let grow = &g[o * hw..(o + 1) * hw];
            let wrow = &w.data()[o * k..(o + 1) * k];
            for p in 0..hw {
                let gv = grow[p];
                if gv == 0.0 {
                    continue;
                }
                let drow = &mut dcol[p * k..(p + 1) * k];
                for t in 0..k {
                    drow[t] += gv * wrow[t];
                }
            }
        }
        let dxs = &mut dx[s * c * hw..(s + 1) * c * hw];
        for oy in 0..h {
            for ox in 0..wd {
                let base = (oy * wd + ox) * k;
                for ch in 0..c {
                    for ky in 0..3 {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = ox as isize + kx as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            dxs[ch * hw + iy as usize * wd + ix as usize] +=
                                dcol[base + ch * 9 + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn max_pool_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.shape().len() != 4 {
        return Err(SsmnError::Shape(format!(
            "max_pool wants (N,C,H,W), got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(SsmnError::Shape(format!(
            "max_pool wants even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for s in 0..n {
        for ch in 0..c {
            let plane_off = (s * c + ch) * h * w;
            let out_off = (s * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = plane_off + (oy * 2 + dy) * w + ox * 2 + dx;
                            // strictly-greater keeps the lowest flat index on ties
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_off + oy * ow + ox] = best;
                    argmax[out_off + oy * ow + ox] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, argmax))
}
