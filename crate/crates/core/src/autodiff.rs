//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records primitive applications in topological order with
//! eagerly computed forward values. [`Tape::backward`] replays the tape in
//! reverse, accumulating adjoints, and returns exact gradients for every
//! node registered as a parameter. The primitive set is exactly what the
//! flow/message/objective layers need; there is no broadcasting and no
//! higher-order differentiation.

use std::collections::HashMap;

use crate::error::{Result, VfgError};

/// Dense row-major f64 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(VfgError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, expect, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![0.0; other.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.data.len() == 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Primitive operations recordable on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Constant,
    Param,
    Add,
    Sub,
    ElemMul,
    /// Multiply by a compile-time scalar attribute.
    Scale(f64),
    /// Matrix [r, c] times vector [c].
    MatVec,
    Relu,
    Tanh,
    Exp,
    /// Elementwise log(sigmoid(x)), numerically stable. Needed for the
    /// Bernoulli reconstruction likelihood.
    LogSigmoid,
    Neg,
    /// Sum of all elements, scalar result.
    Sum,
    /// Sum of absolute values, scalar result. Subgradient uses sign(0) = 0.
    L1Norm,
    /// Sum of squares, scalar result.
    SqNorm,
    /// Concatenate 1-d inputs in order.
    Concat,
    /// Slice [start, end) of a 1-d input.
    Split { start: usize, end: usize },
    /// Elementwise arithmetic mean of same-shaped inputs.
    MeanOf,
}

struct TapeNode {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Append-only record of a forward computation.
///
/// Input ids of any node are strictly smaller than its own id, so a single
/// reverse sweep visits nodes in a valid order. A tape is single-writer;
/// build one per minibatch and copy parameters in as `param` nodes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    params: Vec<NodeId>,
}

#[inline]
fn stable_log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid_neg(x: f64) -> f64 {
    // sigma(-x) = 1 - sigma(x), computed without cancellation
    if x >= 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Node ids registered as trainable parameters, in registration order.
    pub fn param_ids(&self) -> &[NodeId] {
        &self.params
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, vec![], value)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Param, vec![], value);
        self.params.push(id);
        id
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(TapeNode { op, inputs, value });
        id
    }

    /// Record a primitive, eagerly computing its forward value.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let value = self.eval(op, inputs)?;
        if !value.all_finite() {
            return Err(VfgError::NonFinite {
                what: format!("{:?} at tape node #{}", op, self.nodes.len()),
            });
        }
        Ok(self.push(op, inputs.to_vec(), value))
    }

    fn eval(&self, op: Op, inputs: &[NodeId]) -> Result<Tensor> {
        let arity_err = |n: usize| VfgError::ShapeMismatch {
            op: "apply",
            detail: format!("{:?} expects {} input(s), got {}", op, n, inputs.len()),
        };
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        match op {
            Op::Constant | Op::Param => Err(VfgError::ShapeMismatch {
                op: "apply",
                detail: "constant/param carry their own value; use constant()/param()".into(),
            }),
            Op::Add | Op::Sub | Op::ElemMul => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                let (a, b) = (val(0), val(1));
                if a.shape != b.shape {
                    return Err(VfgError::ShapeMismatch {
                        op: "elementwise",
                        detail: format!("{:?} vs {:?}", a.shape, b.shape),
                    });
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
                Ok(Tensor { shape: a.shape.clone(), data })
            }
            Op::Scale(c) => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let a = val(0);
                Ok(Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| c * x).collect() })
            }
            Op::MatVec => {
                if inputs.len() != 2 {
                    return Err(arity_err(2));
                }
                let (w, x) = (val(0), val(1));
                if w.shape.len() != 2 || x.shape.len() != 1 || w.shape[1] != x.shape[0] {
                    return Err(VfgError::ShapeMismatch {
                        op: "matvec",
                        detail: format!("matrix {:?} times vector {:?}", w.shape, x.shape),
                    });
                }
                let (r, c) = (w.shape[0], w.shape[1]);
                let mut out = vec![0.0; r];
                for i in 0..r {
                    let row = &w.data[i * c..(i + 1) * c];
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += row[j] * x.data[j];
                    }
                    out[i] = acc;
                }
                Ok(Tensor { shape: vec![r], data: out })
            }
            Op::Relu | Op::Tanh | Op::Exp | Op::LogSigmoid | Op::Neg => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let a = val(0);
                let f: fn(f64) -> f64 = match op {
                    Op::Relu => |x| x.max(0.0),
                    Op::Tanh => f64::tanh,
                    Op::Exp => f64::exp,
                    Op::LogSigmoid => stable_log_sigmoid,
                    _ => |x| -x,
                };
                Ok(Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x)).collect() })
            }
            Op::Sum | Op::L1Norm | Op::SqNorm => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let a = val(0);
                let s = match op {
                    Op::Sum => a.data.iter().sum(),
                    Op::L1Norm => a.data.iter().map(|v| v.abs()).sum(),
                    _ => a.data.iter().map(|v| v * v).sum(),
                };
                Ok(Tensor::scalar(s))
            }
            Op::Concat => {
                if inputs.is_empty() {
                    return Err(arity_err(1));
                }
                let mut data = Vec::new();
                for k in 0..inputs.len() {
                    let a = val(k);
                    if a.shape.len() != 1 {
                        return Err(VfgError::ShapeMismatch {
                            op: "concat",
                            detail: format!("input {} has shape {:?}, need 1-d", k, a.shape),
                        });
                    }
                    data.extend_from_slice(&a.data);
                }
                Ok(Tensor { shape: vec![data.len()], data })
            }
            Op::Split { start, end } => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                let a = val(0);
                if a.shape.len() != 1 || start >= end || end > a.data.len() {
                    return Err(VfgError::ShapeMismatch {
                        op: "split",
                        detail: format!("[{start}, {end}) of shape {:?}", a.shape),
                    });
                }
                Ok(Tensor::vector(a.data[start..end].to_vec()))
            }
            Op::MeanOf => {
                if inputs.is_empty() {
                    return Err(arity_err(1));
                }
                let first = val(0);
                let mut data = first.data.clone();
                for k in 1..inputs.len() {
                    let a = val(k);
                    if a.shape != first.shape {
                        return Err(VfgError::ShapeMismatch {
                            op: "mean_of",
                            detail: format!("{:?} vs {:?}", first.shape, a.shape),
                        });
                    }
                    for (d, v) in data.iter_mut().zip(&a.data) {
                        *d += v;
                    }
                }
                let inv = 1.0 / inputs.len() as f64;
                for d in data.iter_mut() {
                    *d *= inv;
                }
                Ok(Tensor { shape: first.shape.clone(), data })
            }
        }
    }

    // Convenience wrappers.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn elem_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::ElemMul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.apply(Op::MatVec, &[w, x])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSigmoid, &[a])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Neg, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }
    pub fn l1_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::L1Norm, &[a])
    }
    pub fn sq_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::SqNorm, &[a])
    }
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat, xs)
    }
    pub fn split(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::Split { start, end }, &[a])
    }
    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::MeanOf, xs)
    }

    /// Recompute every forward value from the recorded ops. Used to check
    /// replay determinism; returns the recomputed values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Constant | Op::Param => node.value.clone(),
                op => {
                    // Evaluate against the replayed values, not the cached ones.
                    let mut scratch = Tape::new();
                    let mut ids = Vec::with_capacity(node.inputs.len());
                    for inp in &node.inputs {
                        ids.push(scratch.constant(values[inp.0].clone()));
                    }
                    scratch.eval(op, &ids)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Exact reverse-mode gradients of a scalar loss with respect to every
    /// param node. Unreachable params get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(VfgError::ShapeMismatch {
                op: "backward",
                detail: format!("loss {} has shape {:?}, need scalar", loss, self.value(loss).shape()),
            });
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !g.all_finite() {
                return Err(VfgError::NonFinite { what: format!("adjoint of tape node #{idx}") });
            }
            let node = &self.nodes[idx];
            let ins = &node.inputs;
            let inval = |k: usize| &self.nodes[ins[k].0].value;
            match node.op {
                Op::Constant | Op::Param => {
                    adj[idx] = Some(g); // leaf: keep accumulated adjoint
                }
                Op::Add => {
                    accumulate(&mut adj, ins[0], &g);
                    accumulate(&mut adj, ins[1], &g);
                }
                Op::Sub => {
                    accumulate(&mut adj, ins[0], &g);
                    accumulate_scaled(&mut adj, ins[1], &g, -1.0);
                }
                Op::ElemMul => {
                    let (a, b) = (inval(0).clone(), inval(1).clone());
                    accumulate_mapped(&mut adj, ins[0], &g, |i, gi| gi * b.data[i]);
                    accumulate_mapped(&mut adj, ins[1], &g, |i, gi| gi * a.data[i]);
                }
                Op::Scale(c) => accumulate_scaled(&mut adj, ins[0], &g, c),
                Op::MatVec => {
                    let w = inval(0);
                    let x = inval(1);
                    let (r, c) = (w.shape[0], w.shape[1]);
                    let mut dw = Tensor::zeros(&[r, c]);
                    let mut dx = Tensor::zeros(&[c]);
                    for i in 0..r {
                        let gi = g.data[i];
                        let row = &w.data[i * c..(i + 1) * c];
                        let drow = &mut dw.data[i * c..(i + 1) * c];
                        for j in 0..c {
                            drow[j] = gi * x.data[j];
                            dx.data[j] += gi * row[j];
                        }
                    }
                    accumulate(&mut adj, ins[0], &dw);
                    accumulate(&mut adj, ins[1], &dx);
                }
                Op::Relu => {
                    let x = inval(0).clone();
                    accumulate_mapped(&mut adj, ins[0], &g, |i, gi| if x.data[i] > 0.0 { gi } else { 0.0 });
                }
                Op::Tanh => {
                    let y = node.value.clone();
                    accumulate_mapped(&mut adj, ins[0], &g, |i, gi| gi * (1.0 - y.data[i] * y.data[i]));
                }
                Op::Exp => {
                    let y = node.value.clone();
                    accumulate_mapped(&mut adj, ins[0], &g, |i, gi| gi * y.data[i]);
                }
                Op::LogSigmoid => {
                    let x = inval(0).clone();
                    accumulate_mapped(&mut adj, ins[0], &g, |i, gi| gi * sigmoid_neg(x.data[i]));
                }
                Op::Neg => accumulate_scaled(&mut adj, ins[0], &g, -1.0),
                Op::Sum => {
                    let n = inval(0).len();
                    let shape = inval(0).shape().to_vec();
                    let gv = g.item();
                    let t = Tensor { shape, data: vec![gv; n] };
                    accumulate(&mut adj, ins[0], &t);
                }
                Op::L1Norm => {
                    let x = inval(0);
                    let gv = g.item();
                    let t = Tensor {
                        shape: x.shape.clone(),
                        data: x.data.iter().map(|&v| gv * sign0(v)).collect(),
                    };
                    accumulate(&mut adj, ins[0], &t);
                }
                Op::SqNorm => {
                    let x = inval(0);
                    let gv = g.item();
                    let t = Tensor {
                        shape: x.shape.clone(),
                        data: x.data.iter().map(|&v| 2.0 * gv * v).collect(),
                    };
                    accumulate(&mut adj, ins[0], &t);
                }
                Op::Concat => {
                    let mut offset = 0;
                    for k in 0..ins.len() {
                        let n = inval(k).len();
                        let t = Tensor::vector(g.data[offset..offset + n].to_vec());
                        accumulate(&mut adj, ins[k], &t);
                        offset += n;
                    }
                }
                Op::Split { start, end } => {
                    let x = inval(0);
                    let mut t = Tensor::zeros_like(x);
                    t.data[start..end].copy_from_slice(&g.data);
                    accumulate(&mut adj, ins[0], &t);
                }
                Op::MeanOf => {
                    let inv = 1.0 / ins.len() as f64;
                    for k in 0..ins.len() {
                        accumulate_scaled(&mut adj, ins[k], &g, inv);
                    }
                }
            }
        }

        let mut grads = HashMap::new();
        for &p in &self.params {
            let g = match adj[p.0].take() {
                Some(t) => t,
                None => Tensor::zeros_like(self.value(p)),
            };
            grads.insert(p, g);
        }
        Ok(Gradients { grads })
    }
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, delta: &Tensor) {
    match &mut adj[id.0] {
        Some(t) => {
            for (a, d) in t.data.iter_mut().zip(&delta.data) {
                *a += d;
            }
        }
        slot => *slot = Some(delta.clone()),
    }
}

fn accumulate_scaled(adj: &mut [Option<Tensor>], id: NodeId, delta: &Tensor, c: f64) {
    match &mut adj[id.0] {
        Some(t) => {
            for (a, d) in t.data.iter_mut().zip(&delta.data) {
                *a += c * d;
            }
        }
        slot => {
            let mut t = delta.clone();
            for v in t.data.iter_mut() {
                *v *= c;
            }
            *slot = Some(t);
        }
    }
}

fn accumulate_mapped(
    adj: &mut [Option<Tensor>],
    id: NodeId,
    g: &Tensor,
    f: impl Fn(usize, f64) -> f64,
) {
    match &mut adj[id.0] {
        Some(t) => {
            for (i, a) in t.data.iter_mut().enumerate() {
                *a += f(i, g.data[i]);
            }
        }
        slot => {
            let data = g.data.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            *slot = Some(Tensor { shape: g.shape.clone(), data });
        }
    }
}

/// Gradient of a scalar loss per trainable node.
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradients in the order of `ids`; every id must be a param node.
    pub fn in_order(&self, ids: &[NodeId]) -> Vec<Tensor> {
        ids.iter().map(|id| self.grads[id].clone()).collect()
    }
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` receives a fresh tape plus param node ids (one per entry of
/// `params`) and must return a scalar loss node. Returns the maximum over
/// all parameter coordinates of |analytic - numeric| / max(1, |numeric|).
pub fn grad_check<F>(build: &F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(VfgError::Config("grad_check eps must be > 0".into()));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if !tape.value(loss).is_scalar() {
            return Err(VfgError::ShapeMismatch {
                op: "grad_check",
                detail: "loss must be scalar".into(),
            });
        }
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    if !tape.value(loss).is_scalar() {
        return Err(VfgError::ShapeMismatch { op: "grad_check", detail: "loss must be scalar".into() });
    }
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("param gradient");
        for ci in 0..params[pi].len() {
            let orig = work[pi].data[ci];
            work[pi].data[ci] = orig + eps;
            let up = eval(&work)?;
            work[pi].data[ci] = orig - eps;
            let down = eval(&work)?;
            work[pi].data[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic.data[ci] - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mean_of_example() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let m = tape.mean_of(&[a, b]).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0]);
    }

    #[test]
    fn l1_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let n = tape.l1_norm(x).unwrap();
        assert_eq!(tape.value(n).item(), 3.5);
    }

    #[test]
    fn sq_norm_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![3.0]));
        let loss = tape.sq_norm(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn l1_sign_subgradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![2.0, -5.0]));
        let loss = tape.l1_norm(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, -1.0]);
    }

    #[test]
    fn l1_sign_zero_is_zero() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![0.0, 1.0]));
        let loss = tape.l1_norm(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.relu(p).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::vector(vec![1.0]));
        let unused = tape.param(Tensor::vector(vec![5.0, 6.0]));
        let loss = tape.sq_norm(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn non_finite_result_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1000.0]));
        let e = tape.exp(a);
        assert!(matches!(e, Err(VfgError::NonFinite { .. })));
    }

    #[test]
    fn constant_loss_grad_check_is_zero() {
        let build = |tape: &mut Tape, ids: &[NodeId]| {
            let _ = ids;
            Ok(tape.constant_scalar(3.5))
        };
        let params = [Tensor::vector(vec![1.0, 2.0])];
        let err = grad_check(&build, &params, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }
}
