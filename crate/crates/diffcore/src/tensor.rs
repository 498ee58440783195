use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{invalid, DiffError, Result};
use crate::scalar::Scalar;

/// Maps the gradient of an op's output to one optional gradient per parent,
/// in parent order.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    grad: RefCell<Option<Vec<T>>>,
}

/// Dense row-major array that records the operations applied to it.
///
/// Cloning is cheap (reference counted). A tensor's value never changes after
/// construction; only a leaf's accumulated gradient does, during
/// [`Tensor::backward`].
pub struct Tensor<T: Scalar = f32>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            grad: RefCell::new(None),
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(invalid(
                "new",
                format!("shape {shape:?} needs {} elements, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false))
    }

    /// Leaf tensor whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::build(t.0.shape.clone(), t.0.data.clone(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); numel(shape)], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false)
    }

    /// Rank-0 constant.
    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), vec![value], false)
    }

    /// Builds the result of an op. The graph edge is only recorded when some
    /// parent requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: &[&Tensor<T>],
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::build(shape, data, false);
        }
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad: true,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Some(Box::new(backward)),
            grad: RefCell::new(None),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(invalid("item", format!("tensor has shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Size of the trailing axis (1 for rank 0).
    pub(crate) fn last_dim(&self) -> usize {
        self.0.shape.last().copied().unwrap_or(1)
    }

    /// Reverse-mode sweep from a scalar loss. Every reachable leaf that
    /// requires a gradient has `d loss / d leaf` added to its gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(DiffError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.0.id, vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.get_mut(&parent.0.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                grads.insert(parent.0.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the nodes that require gradients; parents are visited
    /// in declaration order so the traversal is deterministic.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, next)) = stack.pop() {
            if next < node.0.parents.len() {
                let parent = node.0.parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
