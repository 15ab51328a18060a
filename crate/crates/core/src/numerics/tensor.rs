//! The tensor handle, the recorded graph, and the backward pass.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::{NumericsError, Result};

/// Element type for tensors. `f32` in production, `f64` in shadow tests.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Default + 'static
{
    /// Lossy conversion from f64, for constants and RNG draws.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Gradient propagation callback: receives the node's accumulated gradient
/// and pushes contributions into the parents. Consumed by one backward pass.
pub(super) type BackwardFn<T> = Box<dyn FnOnce(&[T])>;

pub(super) struct Node<T: Scalar> {
    pub(super) shape: Vec<usize>,
    pub(super) data: Vec<T>,
    pub(super) grad: Option<Vec<T>>,
    pub(super) requires_grad: bool,
    pub(super) parents: Vec<Tensor<T>>,
    pub(super) backward: Option<BackwardFn<T>>,
}

/// A shared handle to one node of the computation graph. Cloning is cheap
/// and aliases the same storage; graphs are built per forward pass and
/// dropped with the final loss handle, while parameters are long-lived
/// leaves that keep their gradients until the optimizer consumes them.
#[derive(Clone)]
pub struct Tensor<T: Scalar = f32> {
    pub(super) node: Rc<RefCell<Node<T>>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.node.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_node(node: Node<T>) -> Self {
        Self {
            node: Rc::new(RefCell::new(node)),
        }
    }

    /// A constant (non-differentiable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} does not hold {} elements", shape, data.len()),
            });
        }
        Ok(Self::new_node(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A trainable leaf: participates in autodiff and accumulates gradients.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        t.node.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::from_vec(shape, vec![T::zero(); len]).expect("consistent by construction")
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(&[1], vec![v]).expect("consistent by construction")
    }

    pub(super) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        if requires_grad {
            Self::new_node(Node {
                shape,
                data,
                grad: None,
                requires_grad: true,
                parents,
                backward: Some(backward),
            })
        } else {
            // Inference mode: no tape, no parent retention.
            Self::new_node(Node {
                shape,
                data,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            })
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.node.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Vec<T> {
        self.node.borrow().data.clone()
    }

    /// Runs `f` over the raw data without copying it out.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.node.borrow().data)
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        let n = self.node.borrow();
        debug_assert_eq!(n.data.len(), 1, "item() on non-scalar");
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.borrow().grad.clone()
    }

    /// Overwrites the stored values in place (optimizer use). Shape is kept.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let mut n = self.node.borrow_mut();
        if data.len() != n.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "set_data",
                detail: format!("expected {} elements, got {}", n.data.len(), data.len()),
            });
        }
        n.data = data;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.node.borrow().data.iter().all(|v| v.is_finite())
    }

    pub(super) fn accum_grad(&self, contribution: &[T]) {
        let mut n = self.node.borrow_mut();
        debug_assert_eq!(n.data.len(), contribution.len());
        match &mut n.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + *ci;
                }
            }
            None => n.grad = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar result. Gradients accumulate into
    /// every reachable tensor with `requires_grad`; the recorded tape is
    /// consumed, so each forward graph supports one backward call.
    pub fn backward(&self) -> Result<()> {
        {
            let n = self.node.borrow();
            if n.data.len() != 1 {
                return Err(NumericsError::NotAScalar {
                    shape: n.shape.clone(),
                });
            }
        }
        self.accum_grad(&[T::one()]);

        for tensor in Self::topo_order(self) {
            let (grad, backward) = {
                let mut n = tensor.node.borrow_mut();
                if !n.requires_grad {
                    continue;
                }
                (n.grad.clone(), n.backward.take())
            };
            if let (Some(grad), Some(backward)) = (grad, backward) {
                backward(&grad);
            }
        }
        Ok(())
    }

    /// Iterative post-order DFS over parents, reversed so the root comes
    /// first and every node precedes its parents.
    fn topo_order(root: &Tensor<T>) -> Vec<Tensor<T>> {
        enum Frame<T: Scalar> {
            Enter(Tensor<T>),
            Exit(Tensor<T>),
        }
        let mut order = Vec::new();
        let mut seen: HashSet<*const ()> = HashSet::new();
        let mut stack = vec![Frame::Enter(root.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    let key = Rc::as_ptr(&t.node) as *const ();
                    if !seen.insert(key) {
                        continue;
                    }
                    stack.push(Frame::Exit(t.clone()));
                    for p in t.node.borrow().parents.iter() {
                        stack.push(Frame::Enter(p.clone()));
                    }
                }
                Frame::Exit(t) => order.push(t),
            }
        }
        order.reverse();
        order
    }
}
