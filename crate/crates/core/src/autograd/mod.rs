//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. Calling [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into every tracked node. A fresh graph is built for
//! each training step; parameters enter the graph as tracked leaves and are
//! read back by name through [`crate::nn::Bound`].

mod conv;
mod fused;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Real, Tensor};

pub use fused::power_iteration;
pub use ops::normal_cdf;

type GradFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    tracked: bool,
    inputs: Vec<usize>,
    grad_fn: Option<GradFn<T>>,
}

/// The tape.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// An untracked input; no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), false, Vec::new(), None)
    }

    /// A tracked leaf (parameter or input we differentiate against).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), true, Vec::new(), None)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        tracked: bool,
        inputs: Vec<usize>,
        grad_fn: Option<GradFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            tracked,
            inputs,
            grad_fn,
        });
        Var { graph: self, id }
    }

    /// Record the result of an operation over `inputs`.
    ///
    /// `grad_fn` receives the output gradient and a mask telling which inputs
    /// need a gradient; it returns one optional gradient per input, shaped
    /// like that input. It is dropped when no input is tracked.
    pub(crate) fn record<'g>(
        &'g self,
        value: Tensor<T>,
        inputs: &[Var<'g, T>],
        grad_fn: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'g, T> {
        let tracked = inputs.iter().any(|v| v.tracked());
        if tracked {
            self.push(
                Rc::new(value),
                true,
                inputs.iter().map(|v| v.id).collect(),
                Some(Box::new(grad_fn)),
            )
        } else {
            self.push(Rc::new(value), false, Vec::new(), None)
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to another graph");
        let nodes = self.nodes.borrow();
        let seed_shape = nodes[loss.id].value.shape().to_vec();
        assert_eq!(
            seed_shape.iter().product::<usize>(),
            1,
            "backward() requires a scalar loss, got shape {seed_shape:?}"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].tracked {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::ones(&seed_shape));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(f) = node.grad_fn.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].tracked).collect();
            let input_grads = f(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, ig), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(ig), true) = (ig, need) else {
                    continue;
                };
                debug_assert_eq!(
                    ig.shape(),
                    nodes[input].value.shape(),
                    "gradient shape mismatch for node {input}"
                );
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            // Interior gradients are not kept; leaves keep theirs.
            if !node.inputs.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a tracked leaf; `None` if no path reached it.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tracked(&self) -> bool {
        self.graph.nodes.borrow()[self.id].tracked
    }

    /// The scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        let value = self.value();
        self.graph.push(value, false, Vec::new(), None)
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite-difference checks used by unit tests across the crate.

    use super::*;

    /// Max elementwise error of autodiff vs. central differences, relative to
    /// the largest gradient magnitude.
    pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> f64
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
    {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&g, &vars);
        let grads = g.backward(loss);
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

        let eval = |ins: &[Tensor<f64>]| {
            let g = Graph::new();
            let vars: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
            f(&g, &vars).item()
        };
        let mut worst = 0.0f64;
        let scale = analytic
            .iter()
            .map(|t| t.max_abs())
            .fold(1e-12f64, f64::max);
        for (k, input) in inputs.iter().enumerate() {
            for i in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += step;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let err = (numeric - analytic[k].data()[i]).abs() / scale;
                worst = worst.max(err);
            }
        }
        worst
    }
}
