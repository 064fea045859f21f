//! Dense float32 tensors with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every differentiable op records a node
//! holding handles to its inputs and whatever it saved for the backward
//! pass. `backward` walks the recorded graph once in reverse topological
//! order and accumulates gradients into every tensor that requires them.
//! A graph is single-use; rebuilding it is one forward pass away.

mod conv;
mod ops;

pub use conv::conv2d;
pub use ops::{
    activation, add, add_channel_bias, bilinear_upsample, cross_entropy, global_avg_pool,
    group_norm, linear, mse, mul, mul_scalar, sum, Activation,
};

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_DISABLED: Cell<usize> = const { Cell::new(0) };
}

/// Disables graph recording for the duration of the closure.
///
/// Ops executed inside still compute values but create leaf outputs with
/// `requires_grad = false`. Used by the forward pass of ODE integration,
/// evaluation loops, and anywhere gradients are not wanted.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    GRAD_DISABLED.with(|d| d.set(d.get() + 1));
    let out = f();
    GRAD_DISABLED.with(|d| d.set(d.get() - 1));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_DISABLED.with(|d| d.get() == 0)
}

/// One backward rule. Implementors hold their input handles plus any
/// activations saved during the forward pass.
pub(crate) trait BackwardOp: Send + Sync {
    fn inputs(&self) -> Vec<Tensor>;
    /// Maps the output gradient to one gradient per input (None where the
    /// input does not require grad).
    fn backward(&self, grad_out: &[f32]) -> Result<Vec<Option<Vec<f32>>>>;
}

struct Node {
    op: Box<dyn BackwardOp>,
    consumed: AtomicBool,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f32>>>,
    node: Option<Node>,
}

/// A dense row-major float32 tensor, cheap to clone (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

pub(crate) fn check_finite(data: &[f32], op: &'static str) -> Result<()> {
    let mut bad = false;
    for v in data {
        bad |= !v.is_finite();
    }
    if bad {
        Err(Error::NonFinite(op))
    } else {
        Ok(())
    }
}

impl Tensor {
    fn build(
        data: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Arc::new(data),
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// New leaf tensor that does not track gradients.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {:?} does not hold {} elements", shape, data.len()),
            ));
        }
        Ok(Tensor::build(data, shape.to_vec(), false, None))
    }

    /// New leaf parameter: tracks gradients.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(t.requires_grad_leaf(true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(vec![0.0; n], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(vec![value; n], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::build(vec![value], vec![], false, None)
    }

    pub(crate) fn from_op(
        data: Vec<f32>,
        shape: Vec<usize>,
        op: Box<dyn BackwardOp>,
    ) -> Tensor {
        let record = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        if record {
            Tensor::build(
                data,
                shape,
                true,
                Some(Node {
                    op,
                    consumed: AtomicBool::new(false),
                }),
            )
        } else {
            Tensor::build(data, shape, false, None)
        }
    }

    /// Leaf view of the same storage, with `requires_grad` as given.
    /// The clone shares data but has its own identity and gradient slot.
    pub fn requires_grad_leaf(&self, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                requires_grad,
                grad: Mutex::new(None),
                node: None,
            }),
        }
    }

    /// Leaf view of the same storage outside any graph.
    pub fn detach(&self) -> Tensor {
        self.requires_grad_leaf(false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn item(&self) -> Result<f32> {
        if self.len() == 1 {
            Ok(self.inner.data[0])
        } else {
            Err(Error::shape("item", format!("shape {:?}", self.shape())))
        }
    }

    /// Interprets the shape as [B, C, H, W].
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.inner.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            other => Err(Error::shape("dims4", format!("expected 4-d, got {other:?}"))),
        }
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Adds `g` into the stored gradient. Pub(crate): the recorded graph and
    /// the adjoint integrator are the only writers.
    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.len());
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Backward pass from a scalar loss. Populates the gradients of every
    /// tensor in the recorded graph that requires them. Calling it twice on
    /// the same graph is an error: the graph is consumed.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        self.backward_with_grad(&[1.0])
    }

    /// Vector-Jacobian product: backward pass seeded with `seed` (same shape
    /// as `self`). This is the primitive the adjoint method drives.
    pub fn backward_with_grad(&self, seed: &[f32]) -> Result<()> {
        if seed.len() != self.len() {
            return Err(Error::shape(
                "backward",
                format!("seed length {} vs tensor {}", seed.len(), self.len()),
            ));
        }
        if let Some(node) = &self.inner.node {
            if node.consumed.swap(true, Ordering::SeqCst) {
                return Err(Error::StaleGraph);
            }
        } else {
            // Leaf: the gradient is the seed itself.
            if self.requires_grad() {
                self.accumulate_grad(seed);
            }
            return Ok(());
        }

        // Reverse topological order via iterative post-order DFS over nodes.
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(self.id(), seed.to_vec());

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            if t.requires_grad() {
                t.accumulate_grad(&g);
            }
            if let Some(node) = &t.inner.node {
                let input_grads = node.op.backward(&g)?;
                let inputs = node.op.inputs();
                debug_assert_eq!(input_grads.len(), inputs.len());
                for (inp, ig) in inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    debug_assert_eq!(ig.len(), inp.len());
                    match grads.get_mut(&inp.id()) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&ig) {
                                *a += v;
                            }
                        }
                        None => {
                            grads.insert(inp.id(), ig);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Topological order of the graph that produced `self` (inputs before
    /// consumers). Only tensors with recorded nodes or requires_grad appear.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        // Stack of (tensor, children_pushed).
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.contains_key(&t.id()) {
                continue;
            }
            visited.insert(t.id(), ());
            let children: Vec<Tensor> = match &t.inner.node {
                Some(node) => node.op.inputs(),
                None => Vec::new(),
            };
            stack.push((t, true));
            for c in children {
                if !visited.contains_key(&c.id()) {
                    stack.push((c, false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(!t.requires_grad());
    }

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(vec![1.0; 5], &[2, 2]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(vec![3.0, -1.0, 0.5], &[3]).unwrap();
        let loss = sum(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let sq = mul(&x, &x).unwrap();
        let loss = sum(&sq).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // x feeds two consumers; gradients must sum.
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let a = mul(&x, &x).unwrap(); // x^2, d/dx = 4
        let b = mul_scalar(&x, 3.0).unwrap(); // 3x, d/dx = 3
        let loss = sum(&add(&a, &b).unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn second_backward_is_stale() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = sum(&x).unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::StaleGraph)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = mul_scalar(&x, 2.0).unwrap();
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = no_grad(|| mul_scalar(&x, 2.0).unwrap());
        assert!(!y.requires_grad());
        assert_eq!(y.data(), &[2.0, 4.0]);
    }

    #[test]
    fn detach_shares_data() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let d = x.detach();
        assert_eq!(d.data(), x.data());
        assert!(!d.requires_grad());
        assert_ne!(d.id(), x.id());
    }
}
