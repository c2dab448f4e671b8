//! Dense arrays and a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation applied during a forward pass in an
//! append-only arena. Because a node can only reference nodes created before
//! it, walking the arena backwards visits every node after all of its
//! consumers, which is exactly the order reverse-mode accumulation needs.
//!
//! The engine is generic over the element type. Training runs in `f32`;
//! verification harnesses instantiate the same code in `f64`.

mod array;
mod conv;
mod elementwise;
mod gradcheck;
pub(crate) mod kernels;
mod linalg;
mod loss;
mod reduce;
mod shape;
#[cfg(test)]
mod tests;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

pub use array::DiffArray;
pub use conv::Conv2dGeometry;
pub use elementwise::{BinaryKind, UnaryKind};
pub use gradcheck::{grad_check, GRAD_CHECK_FLOOR};

/// Floating point element type usable on a tape.
pub trait Real: Float + FromPrimitive + NumAssign + Default + Debug + Sum + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ScanSaved<T> {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    /// Hidden states h_t for every step, `[B, L, C, N]`.
    pub states: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, k: Var, geom: Conv2dGeometry },
    Conv1dCausal { x: Var, k: Var },
    Unary { x: Var, kind: UnaryKind<T> },
    Binary { a: Var, b: Var, kind: BinaryKind },
    Mean { x: Var, axes: Vec<usize> },
    Sum { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Flip { x: Var, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Scan { inputs: [Var; 6], saved: Box<ScanSaved<T>> },
    WeightedBce { logits: Var, labels: Vec<T>, weights: Vec<T> },
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    /// Gradient of the root with respect to `v`, if `v` participates.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an array as a leaf. Its `requires_grad` flag decides whether
    /// gradients flow into it.
    pub fn leaf(&mut self, array: &DiffArray<T>) -> Var {
        self.push(array.shape().to_vec(), array.data().to_vec(), Op::Leaf, array.requires_grad())
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        check_shape(&shape, data.len())?;
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a standalone array.
    pub fn to_array(&self, v: Var) -> DiffArray<T> {
        let n = &self.nodes[v.0];
        DiffArray::new(n.shape.clone(), n.data.clone()).expect("tape nodes are well formed")
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let numel = self.nodes[root.0].data.len();
        if numel != 1 {
            return Err(Error::shape(format!("backward needs a scalar root, got {numel} elements")));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let mut acc = Accumulator { tape: self, grads };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => linalg::matmul_backward(&mut acc, *a, *b, *m, *k, *n, g),
            Op::Conv2d { x, k, geom } => conv::conv2d_backward(&mut acc, *x, *k, geom, g),
            Op::Conv1dCausal { x, k } => conv::conv1d_backward(&mut acc, *x, *k, g),
            Op::Unary { x, kind } => elementwise::unary_backward(&mut acc, *x, kind, &node.data, g),
            Op::Binary { a, b, kind } => elementwise::binary_backward(&mut acc, *a, *b, *kind, &node.shape, g),
            Op::Mean { x, axes } => reduce::mean_backward(&mut acc, *x, axes, g),
            Op::Sum { x } => reduce::sum_backward(&mut acc, *x, g),
            Op::Reshape { x } => acc.add(*x, |buf| add_into(buf, g)),
            Op::Permute { x, perm } => shape::permute_backward(&mut acc, *x, perm, g),
            Op::Flip { x, axis } => shape::flip_backward(&mut acc, *x, *axis, g),
            Op::Slice { x, axis, start } => shape::slice_backward(&mut acc, *x, *axis, *start, &node.shape, g),
            Op::Scan { inputs, saved } => crate::ssm::scan::scan_backward(&mut acc, inputs, saved, g),
            Op::WeightedBce { logits, labels, weights } => loss::bce_backward(&mut acc, *logits, labels, weights, g),
        }
    }
}

/// Gradient sink used by backward rules. Only inputs that require gradients
/// get a buffer.
pub(crate) struct Accumulator<'a, T: Real> {
    pub tape: &'a Tape<T>,
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> Accumulator<'_, T> {
    pub fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.tape.nodes[v.0].shape
    }

    /// Runs `f` on the gradient buffer of `v` (zero-initialised on first use).
    pub fn add(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let len = self.tape.nodes[v.0].data.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }
}

pub(crate) fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape(format!("shape {shape:?} holds {numel} elements but data has {len}")));
    }
    Ok(())
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
