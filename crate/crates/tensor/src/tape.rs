use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are tied to one forward pass: once `backward` clears the tape,
/// old handles are rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: u32,
    generation: u32,
}

pub(crate) struct Node {
    pub value: Tensor,
    pub needs_grad: bool,
    pub op: Op,
    /// Unrounded value of scalar reductions (mse, sum).
    pub wide: Option<f64>,
}

pub(crate) enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    BatchNorm(ops::norm::BnSaved),
    Relu {
        x: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Dropout {
        x: usize,
        mask: Vec<f32>,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: usize,
    },
    MaxPoolSet {
        x: usize,
        argmax: Vec<u32>,
    },
    Concat {
        a: usize,
        b: usize,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Reshape {
        x: usize,
    },
    Mse {
        pred: usize,
        target: usize,
    },
    Sum {
        x: usize,
    },
}

/// Ordered record of the operations of one forward pass.
///
/// All randomness used while recording (dropout masks) comes from the seed
/// given at construction.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) rng: ChaCha8Rng,
    generation: u32,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by the leaf handles of the
/// pass (plus any retained intermediates).
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<Var, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.map.get(&v).map(Vec::as_slice)
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Stores the gradient of `v` on `tensor`.
    pub fn apply_to(&self, v: Var, tensor: &mut Tensor) -> Result<bool> {
        match self.map.get(&v) {
            Some(g) => tensor.set_grad(g.clone()).map(|_| true),
            None => Ok(false),
        }
    }
}

impl Tape {
    /// Hash of every piecewise choice made so far: ReLU input signs and
    /// max-pool winners. Two passes with equal signatures took the same
    /// linear piece of the network.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.nodes[*x].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } | Op::MaxPoolSet { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            generation: 0,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// reports a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        let needs_grad = tensor.requires_grad();
        Ok(self.push_node(tensor, needs_grad, Op::Leaf))
    }

    pub fn param(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    /// Scalar value at f64 precision. Reductions keep their accumulator
    /// before it is rounded into f32 storage.
    pub fn scalar_f64(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[self.index(v)?];
        match (node.wide, node.value.item()) {
            (Some(w), _) => Ok(w),
            (None, Some(x)) => Ok(x as f64),
            (None, None) => Err(TensorError::NonScalarLoss(node.value.shape().to_vec())),
        }
    }

    pub(crate) fn set_wide(&mut self, v: Var, value: f64) {
        self.nodes[v.idx as usize].wide = Some(value);
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.index(v)?].needs_grad)
    }

    pub(crate) fn index(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.idx as usize >= self.nodes.len() {
            return Err(TensorError::StaleVar);
        }
        Ok(v.idx as usize)
    }

    fn push_node(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.consumed = false;
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
            wide: None,
        });
        Var {
            idx,
            generation: self.generation,
        }
    }

    /// Records an op output, rejecting non-finite results.
    pub(crate) fn push(&mut self, name: &'static str, value: Tensor, inputs: &[usize], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push_node(value, needs_grad, op))
    }

    /// Reverse pass from a scalar. Returns gradients for every
    /// `requires_grad` leaf (zeros when unreachable) and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.backward_retain(loss, &[])
    }

    /// Like [`backward`](Self::backward), additionally returning the
    /// gradients of the intermediate values in `retain`.
    pub fn backward_retain(&mut self, loss: Var, retain: &[Var]) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let root = self.index(loss)?;
        let shape = self.nodes[root].value.shape().to_vec();
        if self.nodes[root].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let retain_idx = retain
            .iter()
            .map(|&v| self.index(v))
            .collect::<Result<Vec<_>>>()?;

        let mut out = Gradients::default();
        if self.nodes[root].needs_grad {
            let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.nodes.len());
            grads.resize_with(self.nodes.len(), || None);
            grads[root] = Some(vec![1.0]);
            for i in (0..=root).rev() {
                if !self.nodes[i].needs_grad {
                    continue;
                }
                let Some(g) = grads[i].take() else { continue };
                if !matches!(self.nodes[i].op, Op::Leaf) {
                    ops::backward_node(&self.nodes, i, &g, &mut grads);
                }
                grads[i] = Some(g);
            }
            for (i, node) in self.nodes.iter().enumerate() {
                let keep_leaf = matches!(node.op, Op::Leaf) && node.needs_grad;
                if keep_leaf || retain_idx.contains(&i) {
                    let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    out.map.insert(
                        Var {
                            idx: i as u32,
                            generation: self.generation,
                        },
                        g,
                    );
                }
            }
        }
        self.clear();
        self.consumed = true;
        Ok(out)
    }

    /// Drops all recorded nodes and invalidates outstanding handles.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation = self.generation.wrapping_add(1);
    }
}

/// Adds `contrib` into the gradient slot of node `idx` if it needs one.
pub(crate) fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f32>>], idx: usize, contrib: Vec<f32>) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut grads[idx] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new(0);
        let w = tape.param(Tensor::from_slice(&[3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
        let s = tape.sum(w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn detached_loss_populates_nothing() {
        let mut tape = Tape::new(0);
        let c = tape.constant(Tensor::from_slice(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let t = tape.constant(Tensor::from_slice(&[2], &[0.0, 0.0]).unwrap()).unwrap();
        let loss = tape.mse(c, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::new(0);
        let used = tape.param(Tensor::from_slice(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let unused = tape.param(Tensor::from_slice(&[3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let s = tape.sum(used).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new(0);
        let w = tape.param(Tensor::from_slice(&[1], &[1.0]).unwrap()).unwrap();
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::TapeConsumed);
        assert!(tape.is_empty());
    }

    #[test]
    fn stale_handles_rejected_after_new_pass() {
        let mut tape = Tape::new(0);
        let w = tape.param(Tensor::from_slice(&[1], &[1.0]).unwrap()).unwrap();
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        let w2 = tape.param(Tensor::from_slice(&[1], &[1.0]).unwrap()).unwrap();
        assert_eq!(tape.value(w).unwrap_err(), TensorError::StaleVar);
        assert!(tape.value(w2).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new(0);
        let w = tape.param(Tensor::from_slice(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(w + w) -> dw = 2
        let mut tape = Tape::new(0);
        let w = tape.param(Tensor::from_slice(&[2], &[1.0, -3.0]).unwrap()).unwrap();
        let d = tape.add(w, w).unwrap();
        let s = tape.sum(d).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, 2.0]);
    }
}
