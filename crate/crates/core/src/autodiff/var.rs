use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::tensor::{Scalar, Tensor};

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

/// Backward rule of an operation: maps the output gradient to one optional
/// gradient per parent, given the output value and the parents themselves.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>>>;

struct Op<T: Scalar> {
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// A value in the reverse-mode graph.
///
/// Nodes reference their parents, so a graph lives exactly as long as some
/// handle to its output does. Nodes that do not depend on any
/// gradient-requiring leaf keep no parents and free their inputs eagerly,
/// which is what makes inference passes cheap.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            op: None,
        }))
    }

    /// A leaf whose gradient is reported by [`Var::backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: None,
        }))
    }

    /// Records an operation. The backward rule is kept only when a parent
    /// requires gradients.
    pub fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(Var::requires_grad);
        let op = requires_grad.then_some(Op { parents, backward });
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.0.value.data()
    }

    pub fn rows(&self) -> usize {
        self.0.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Var::constant(self.0.value.clone())
    }

    /// Gradients of this scalar with respect to every reachable leaf.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(self.0.value.len(), 1, "backward() needs a scalar output");
        self.backward_with(Tensor::ones(self.shape()))
    }

    /// Vector-Jacobian product seeded with `seed` (same shape as the value).
    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.len(), self.0.value.len(), "seed size mismatch");
        let mut leaves = HashMap::new();
        if !self.requires_grad() {
            return Gradients { leaves };
        }
        // Ids increase with creation order, so descending id is a valid
        // reverse topological order.
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.id()) {
                continue;
            }
            if let Some(op) = &v.0.op {
                for p in &op.parents {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(v);
        }
        order.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

        let mut pending: HashMap<u64, Tensor<T>> = HashMap::new();
        pending.insert(self.id(), seed.reshape(self.shape()));
        for v in order {
            let Some(grad) = pending.remove(&v.id()) else {
                continue;
            };
            match &v.0.op {
                None => {
                    leaves.insert(v.id(), grad);
                }
                Some(op) => {
                    let parent_grads = (op.backward)(&grad, &v.0.value, &op.parents);
                    debug_assert_eq!(parent_grads.len(), op.parents.len());
                    for (p, g) in op.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), p.value().len(), "gradient size for parent");
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                pending.insert(p.id(), g.reshape(p.shape()));
                            }
                        }
                    }
                }
            }
        }
        Gradients { leaves }
    }
}

/// Leaf gradients produced by a backward pass.
pub struct Gradients<T> {
    leaves: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id())
    }

    /// Gradient of `var`, or zeros when it did not influence the output.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
