//! Affine coupling blocks and stacks: the invertible edge functions.
//!
//! Each block keeps one coordinate partition fixed and affinely transforms
//! the other; scale and shift come from small MLPs of the fixed partition
//! (three affine layers of width 64 with two relu activations). The scale
//! is clamped through `clamp * tanh(raw)` so that a block's condition
//! number stays bounded and inverse round-trips remain stable.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Result, VfgError};
use crate::rng::SplitMix64;

pub const HIDDEN_WIDTH: usize = 64;
pub const DEFAULT_CLAMP: f64 = 2.0;
/// Default coupling blocks per flow edge.
pub const DEFAULT_BLOCKS: usize = 4;

/// Three affine layers, two relu activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl Mlp {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        let h = HIDDEN_WIDTH;
        Mlp {
            in_dim,
            out_dim,
            w1: Tensor::zeros(&[h, in_dim]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, h]),
            b2: Tensor::zeros(&[h]),
            w3: Tensor::zeros(&[out_dim, h]),
            b3: Tensor::zeros(&[out_dim]),
        }
    }

    fn glorot(in_dim: usize, out_dim: usize, rng: &mut SplitMix64, zero_last: bool) -> Self {
        let h = HIDDEN_WIDTH;
        let mut mlp = Mlp::zeros(in_dim, out_dim);
        fill_glorot(&mut mlp.w1, in_dim, h, rng);
        fill_glorot(&mut mlp.w2, h, h, rng);
        if !zero_last {
            fill_glorot(&mut mlp.w3, h, out_dim, rng);
        }
        mlp
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

fn fill_glorot(t: &mut Tensor, fan_in: usize, fan_out: usize, rng: &mut SplitMix64) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.next_range(-a, a);
    }
}

/// One affine coupling bijection on R^dim.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    pub dim: usize,
    /// Size of the fixed partition A; always ceil(dim/2).
    pub a_len: usize,
    /// When set, partition A sits at the tail of the vector instead of the head.
    pub swap: bool,
    pub clamp: f64,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
}

/// Ordered coupling blocks with alternating partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    pub dim: usize,
    pub blocks: Vec<CouplingBlock>,
}

/// How to initialize flow parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Final layers zeroed: the stack starts as the identity map.
    NearIdentity,
    /// All layers Glorot-uniform.
    Random,
}

/// Build a flow stack of `blocks` coupling blocks; partitions alternate
/// between consecutive blocks. Deterministic given the seed.
pub fn init_flow(dim: usize, blocks: usize, seed: u64, mode: InitMode) -> Result<FlowStack> {
    if dim < 2 {
        return Err(VfgError::Config(format!("coupling flows need dim >= 2, got {dim}")));
    }
    if blocks == 0 {
        return Err(VfgError::Config("flow stack needs at least one block".into()));
    }
    let a_len = dim.div_ceil(2);
    let b_len = dim - a_len;
    let mut out = Vec::with_capacity(blocks);
    for k in 0..blocks {
        let mut rng = SplitMix64::stream(seed, k as u64);
        let zero_last = mode == InitMode::NearIdentity;
        out.push(CouplingBlock {
            dim,
            a_len,
            swap: k % 2 == 1,
            clamp: DEFAULT_CLAMP,
            scale_net: Mlp::glorot(a_len, b_len, &mut rng, zero_last),
            shift_net: Mlp::glorot(a_len, b_len, &mut rng, zero_last),
        });
    }
    Ok(FlowStack { dim, blocks: out })
}

// ---------------------------------------------------------------------------
// Tape-bound evaluation
// ---------------------------------------------------------------------------

/// An MLP whose parameters live on a tape.
#[derive(Clone)]
pub struct BoundMlp {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

impl BoundMlp {
    fn bind(mlp: &Mlp, tape: &mut Tape, trainable: bool) -> Self {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundMlp {
            w1: reg(&mlp.w1),
            b1: reg(&mlp.b1),
            w2: reg(&mlp.w2),
            b2: reg(&mlp.b2),
            w3: reg(&mlp.w3),
            b3: reg(&mlp.b3),
        }
    }

    fn ids(&self) -> [NodeId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let z1 = tape.matvec(self.w1, x)?;
        let z1 = tape.add(z1, self.b1)?;
        let h1 = tape.relu(z1)?;
        let z2 = tape.matvec(self.w2, h1)?;
        let z2 = tape.add(z2, self.b2)?;
        let h2 = tape.relu(z2)?;
        let z3 = tape.matvec(self.w3, h2)?;
        tape.add(z3, self.b3)
    }
}

#[derive(Clone)]
pub struct BoundBlock {
    pub dim: usize,
    pub a_len: usize,
    pub swap: bool,
    pub clamp: f64,
    pub scale_net: BoundMlp,
    pub shift_net: BoundMlp,
}

impl BoundBlock {
    fn partition(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        // Returns (part_a, part_b).
        if self.swap {
            let b = tape.split(x, 0, self.dim - self.a_len)?;
            let a = tape.split(x, self.dim - self.a_len, self.dim)?;
            Ok((a, b))
        } else {
            let a = tape.split(x, 0, self.a_len)?;
            let b = tape.split(x, self.a_len, self.dim)?;
            Ok((a, b))
        }
    }

    fn assemble(&self, tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.swap {
            tape.concat(&[b, a])
        } else {
            tape.concat(&[a, b])
        }
    }

    fn scale_shift(&self, tape: &mut Tape, a: NodeId) -> Result<(NodeId, NodeId)> {
        let raw = self.scale_net.apply(tape, a)?;
        let squashed = tape.tanh(raw)?;
        let s = tape.scale(squashed, self.clamp)?;
        let t = self.shift_net.apply(tape, a)?;
        Ok((s, t))
    }

    /// y_B = x_B * exp(s(x_A)) + t(x_A), y_A = x_A; logdet = sum(s).
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        let (xa, xb) = self.partition(tape, x)?;
        let (s, t) = self.scale_shift(tape, xa)?;
        let es = tape.exp(s)?;
        let scaled = tape.elem_mul(xb, es)?;
        let yb = tape.add(scaled, t)?;
        let y = self.assemble(tape, xa, yb)?;
        let logdet = tape.sum(s)?;
        Ok((y, logdet))
    }

    /// x_B = (y_B - t(y_A)) * exp(-s(y_A)); logdet is that of the inverse map.
    pub fn inverse(&self, tape: &mut Tape, y: NodeId) -> Result<(NodeId, NodeId)> {
        let (ya, yb) = self.partition(tape, y)?;
        let (s, t) = self.scale_shift(tape, ya)?;
        let neg_s = tape.neg(s)?;
        let ens = tape.exp(neg_s)?;
        let shifted = tape.sub(yb, t)?;
        let xb = tape.elem_mul(shifted, ens)?;
        let x = self.assemble(tape, ya, xb)?;
        let logdet = tape.sum(neg_s)?;
        Ok((x, logdet))
    }
}

#[derive(Clone)]
pub struct BoundStack {
    pub dim: usize,
    pub blocks: Vec<BoundBlock>,
}

impl FlowStack {
    /// Register this stack's parameters on a tape. With `trainable` they
    /// become param nodes (in `param_tensors` order), otherwise constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundStack {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                dim: b.dim,
                a_len: b.a_len,
                swap: b.swap,
                clamp: b.clamp,
                scale_net: BoundMlp::bind(&b.scale_net, tape, trainable),
                shift_net: BoundMlp::bind(&b.shift_net, tape, trainable),
            })
            .collect();
        BoundStack { dim: self.dim, blocks }
    }

    /// Parameter tensors in a fixed documented order:
    /// per block, scale net then shift net, each as w1,b1,w2,b2,w3,b3.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.scale_net.tensors());
            out.extend(b.shift_net.tensors());
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.scale_net.tensors_mut());
            out.extend(b.shift_net.tensors_mut());
        }
        out
    }
}

impl BoundStack {
    /// Node ids of bound parameters, matching `FlowStack::param_tensors` order.
    pub fn param_node_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.scale_net.ids());
            out.extend(b.shift_net.ids());
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let mut logdet = tape.constant_scalar(0.0);
        for b in &self.blocks {
            let (y, ld) = b.forward(tape, h)?;
            h = y;
            logdet = tape.add(logdet, ld)?;
        }
        Ok((h, logdet))
    }

    pub fn inverse(&self, tape: &mut Tape, y: NodeId) -> Result<(NodeId, NodeId)> {
        let mut h = y;
        let mut logdet = tape.constant_scalar(0.0);
        for b in self.blocks.iter().rev() {
            let (x, ld) = b.inverse(tape, h)?;
            h = x;
            logdet = tape.add(logdet, ld)?;
        }
        Ok((h, logdet))
    }
}

// ---------------------------------------------------------------------------
// Value-level wrappers (scratch tape under the hood)
// ---------------------------------------------------------------------------

fn run_value(
    stack: &FlowStack,
    x: &[f64],
    dir: fn(&BoundStack, &mut Tape, NodeId) -> Result<(NodeId, NodeId)>,
) -> Result<(Vec<f64>, f64)> {
    if x.len() != stack.dim {
        return Err(VfgError::ShapeMismatch {
            op: "flow",
            detail: format!("input len {} vs stack dim {}", x.len(), stack.dim),
        });
    }
    let mut tape = Tape::new();
    let bound = stack.bind(&mut tape, false);
    let xin = tape.constant(Tensor::vector(x.to_vec()));
    let (y, ld) = dir(&bound, &mut tape, xin)?;
    Ok((tape.value(y).data().to_vec(), tape.value(ld).item()))
}

pub fn flow_forward(stack: &FlowStack, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    run_value(stack, x, BoundStack::forward)
}

pub fn flow_inverse(stack: &FlowStack, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    run_value(stack, y, BoundStack::inverse)
}

pub fn coupling_forward(block: &CouplingBlock, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let single = FlowStack { dim: block.dim, blocks: vec![block.clone()] };
    flow_forward(&single, x)
}

pub fn coupling_inverse(block: &CouplingBlock, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let single = FlowStack { dim: block.dim, blocks: vec![block.clone()] };
    flow_inverse(&single, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::stream(seed, 0xF10);
        (0..dim).map(|_| rng.next_gaussian()).collect()
    }

    #[test]
    fn near_identity_is_identity() {
        let stack = init_flow(6, 3, 7, InitMode::NearIdentity).unwrap();
        let x = rand_vec(6, 1);
        let (y, ld) = flow_forward(&stack, &x).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn closed_form_block() {
        // Force s = ln 2 on the B partition and t = 1 by setting only the
        // final biases of otherwise-zero nets.
        let mut stack = init_flow(2, 1, 0, InitMode::NearIdentity).unwrap();
        for b in &mut stack.blocks {
            for t in b.scale_net.tensors_mut() {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            for t in b.shift_net.tensors_mut() {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            let target = (2.0f64).ln() / b.clamp;
            b.scale_net.b3.data_mut()[0] = 0.5 * ((1.0 + target) / (1.0 - target)).ln(); // atanh
            b.shift_net.b3.data_mut()[0] = 1.0;
        }
        let (y, ld) = flow_forward(&stack, &[0.5, 1.0]).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-12);
        assert!((y[1] - 3.0).abs() < 1e-12);
        assert!((ld - (2.0f64).ln()).abs() < 1e-12);

        let (x, ldi) = flow_inverse(&stack, &[0.5, 3.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12);
        assert!((x[1] - 1.0).abs() < 1e-12);
        assert!((ldi + (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn round_trip_dim8() {
        let stack = init_flow(8, 4, 99, InitMode::Random).unwrap();
        let x = rand_vec(8, 2);
        let (y, _) = flow_forward(&stack, &x).unwrap();
        let (back, _) = flow_inverse(&stack, &y).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn logdet_antisymmetric() {
        let stack = init_flow(4, 4, 5, InitMode::Random).unwrap();
        let x = rand_vec(4, 3);
        let (y, ld_f) = flow_forward(&stack, &x).unwrap();
        let (_, ld_i) = flow_inverse(&stack, &y).unwrap();
        assert!((ld_f + ld_i).abs() < 1e-10, "{ld_f} vs {ld_i}");
    }

    #[test]
    fn single_block_stack_equals_coupling_op() {
        let stack = init_flow(4, 1, 11, InitMode::Random).unwrap();
        let x = rand_vec(4, 4);
        let (y_stack, ld_stack) = flow_forward(&stack, &x).unwrap();
        let (y_block, ld_block) = coupling_forward(&stack.blocks[0], &x).unwrap();
        assert_eq!(y_stack, y_block);
        assert_eq!(ld_stack, ld_block);
    }

    #[test]
    fn init_determinism() {
        let a = init_flow(6, 2, 42, InitMode::Random).unwrap();
        let b = init_flow(6, 2, 42, InitMode::Random).unwrap();
        assert_eq!(a, b);
        let c = init_flow(6, 2, 43, InitMode::Random).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dim_one_rejected() {
        assert!(init_flow(1, 2, 0, InitMode::Random).is_err());
    }

    #[test]
    fn scale_stays_clamped() {
        // Even with inflated weights the scale output obeys |s| <= clamp.
        let mut stack = init_flow(2, 1, 3, InitMode::Random).unwrap();
        for t in stack.blocks[0].scale_net.tensors_mut() {
            for v in t.data_mut() {
                *v *= 50.0;
            }
        }
        let block = &stack.blocks[0];
        for seed in 0..20 {
            let x = rand_vec(2, 1000 + seed);
            let (_, ld) = coupling_forward(block, &x).unwrap();
            // dim 2: one scale coordinate, so |logdet| <= clamp
            assert!(ld.abs() <= block.clamp + 1e-12);
        }
    }

    #[test]
    fn odd_dim_partition() {
        let stack = init_flow(5, 2, 1, InitMode::Random).unwrap();
        assert_eq!(stack.blocks[0].a_len, 3);
        assert!(!stack.blocks[0].swap);
        assert!(stack.blocks[1].swap);
        let x = rand_vec(5, 9);
        let (y, _) = flow_forward(&stack, &x).unwrap();
        let (back, _) = flow_inverse(&stack, &y).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
