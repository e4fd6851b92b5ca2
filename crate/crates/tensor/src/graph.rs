//! Append-only computation tape.
//!
//! Every operation on a [`Var`] appends a node holding its forward value and,
//! when any input tracks gradients, a [`Function`] that maps the output
//! gradient to input gradients. Inputs always precede their consumers, so a
//! single reverse sweep over the node list is a valid topological order.

use std::cell::RefCell;
use std::rc::Rc;

use crate::{Tensor, TensorError};

/// Backward rule of a recorded operation.
///
/// Implementations may hold any saved activations they need. Custom
/// differentiable operators outside this crate implement this trait and are
/// recorded with [`Graph::record`].
pub trait Function {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; `None` when the input does not need a
    /// gradient (`ctx.needs_grad[i] == false`) or the gradient is zero.
    fn backward(&self, ctx: &BackwardContext<'_>) -> Vec<Option<Tensor>>;
}

pub struct BackwardContext<'a> {
    pub inputs: &'a [Rc<Tensor>],
    pub output: &'a Tensor,
    pub grad_output: &'a Tensor,
    pub needs_grad: &'a [bool],
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    func: Option<Box<dyn Function>>,
    requires_grad: bool,
    /// Accumulated gradient for leaves that require it.
    leaf_grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives gradients during [`Graph::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            func: None,
            requires_grad,
            leaf_grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends the result of an operation. The backward rule is kept only
    /// when some input requires a gradient.
    pub fn record<'g>(
        &'g self,
        func: Box<dyn Function>,
        inputs: &[Var<'g>],
        output: Tensor,
    ) -> Var<'g> {
        let mut nodes = self.nodes.borrow_mut();
        for v in inputs {
            assert!(
                std::ptr::eq(v.graph, self),
                "{}: input from another graph",
                func.name()
            );
        }
        if cfg!(debug_assertions) && !output.is_finite() {
            let finite_inputs = inputs.iter().all(|v| nodes[v.id].value.is_finite());
            debug_assert!(
                !finite_inputs,
                "{} produced a non-finite value from finite inputs",
                func.name()
            );
        }
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(output),
            inputs: inputs.iter().map(|v| v.id).collect(),
            func: requires_grad.then_some(func),
            requires_grad,
            leaf_grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients of parameter leaves are
    /// added to whatever they already hold; see [`Graph::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<(), TensorError> {
        assert!(
            std::ptr::eq(loss.graph, self),
            "backward: loss from another graph"
        );
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if nodes[id].func.is_none() {
                if nodes[id].requires_grad {
                    let slot = &mut nodes[id].leaf_grad;
                    match slot {
                        Some(acc) => acc.add_assign(&grad)?,
                        None => *slot = Some(grad),
                    }
                }
                continue;
            }
            let node = &nodes[id];
            let func = node.func.as_ref().expect("checked above");
            let inputs: Vec<Rc<Tensor>> = node
                .inputs
                .iter()
                .map(|&i| Rc::clone(&nodes[i].value))
                .collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let input_grads = func.backward(&BackwardContext {
                inputs: &inputs,
                output: &node.value,
                grad_output: &grad,
                needs_grad: &needs,
            });
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", func.name());
            let input_ids = node.inputs.clone();
            for (input_id, g) in input_ids.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input_id].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[input_id].value.shape());
                match &mut grads[input_id] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.leaf_grad = None;
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a parameter leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.graph.nodes.borrow()[self.id].leaf_grad.clone()
    }

    /// Gradient of a parameter leaf, zero-filled when nothing reached it.
    pub fn grad_or_zeros(&self) -> Tensor {
        self.grad().unwrap_or_else(|| Tensor::zeros(&self.shape()))
    }
}
