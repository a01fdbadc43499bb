//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Nodes whose
//! inputs never touch a gradient-tracking leaf keep no backward closure, so
//! inference on a tape costs little more than plain evaluation.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) struct BackCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        })
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[usize],
        backward: impl Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        })
    }

    /// Gradients of a scalar-valued output with respect to every tracked node.
    pub fn gradients(&self, output: Var<'_, T>) -> Gradients<T> {
        let seed = {
            let nodes = self.nodes.borrow();
            Tensor::full(nodes[output.id].value.shape(), T::one())
        };
        self.gradients_seeded(output, seed)
    }

    /// Vector-Jacobian product: back-propagates `seed` from `output`.
    pub fn gradients_seeded(&self, output: Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(
            seed.shape(),
            nodes[output.id].value.shape(),
            "seed shape must match the output"
        );
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let ctx = BackCtx {
                grad: &grad,
                out: &node.value,
                inputs,
                needs,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), nodes[p].value.len());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf; zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads[var.id].take() {
            Some(g) => g,
            None => Tensor::zeros(&var.shape()),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_track_gradients() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let d = c.scale(3.0);
        assert!(!d.requires_grad());
        let x = tape.leaf(Tensor::scalar(1.5));
        let y = x.mul(&d).add(&x);
        let g = tape.gradients(y);
        assert_eq!(g.wrt(x).data(), &[7.0]);
        assert_eq!(g.wrt(c).data(), &[0.0]);
    }

    #[test]
    fn reused_variable_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).mul(&x);
        let g = tape.gradients(y);
        assert!((g.wrt(x).data()[0] - 27.0).abs() < 1e-12);
    }
}
