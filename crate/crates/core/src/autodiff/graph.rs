use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient of a node to one gradient per parent (in parent
/// order). `None` means the parent receives no gradient from this node.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and the backward sweep is a single reverse scan. A tape
/// is single-writer; independent tapes may live on different threads.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    frozen: Cell<bool>,
    sign_fault: RefCell<Option<String>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            frozen: Cell::new(false),
            sign_fault: RefCell::new(None),
        }
    }

    /// Test hook: negates the backward pass of every node recorded afterwards
    /// whose op name is `op`.
    pub fn inject_sign_fault(&self, op: &str) {
        *self.sign_fault.borrow_mut() = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.get()
    }

    /// Records a leaf. It takes part in differentiation when the tensor was
    /// flagged with `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        self.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    /// Leaf that always receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Appends an operation node. The backward closure is dropped when no
    /// parent participates in differentiation.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let backward = if requires_grad {
            let faulty = self.sign_fault.borrow().as_deref() == Some(op);
            if faulty {
                Some(Box::new(move |g: &[T]| {
                    backward(g)
                        .into_iter()
                        .map(|pg| pg.map(|v| v.into_iter().map(|x| -x).collect()))
                        .collect()
                }) as BackwardFn<T>)
            } else {
                Some(backward)
            }
        } else {
            None
        };
        self.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
        })
    }

    fn push(&self, node: Node<T>) -> Var {
        assert!(
            !self.frozen.get(),
            "cannot record on a tape after backward has run"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Runs the reverse sweep from a scalar output and freezes the tape.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        self.frozen.set(true);

        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.len(), "op {}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| match g {
                Some(g) if node.parents.is_empty() && node.requires_grad => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of every leaf that required one, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
