//! Define-by-run gradient tape.
//!
//! Every differentiable operation appends a node holding its value, the ids
//! of its parents and a closure computing the parents' adjoints. Node ids are
//! assigned in creation order, so parents always precede children and a
//! single reverse sweep visits every node once.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Inputs handed to a node's adjoint rule.
pub(crate) struct Backward<'a> {
    pub grad: &'a Tensor,
    pub inputs: &'a [Rc<Tensor>],
    pub output: &'a Tensor,
    /// Which inputs need an adjoint; rules may skip the rest.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn Fn(&Backward<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input (parameter or probed input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// A detached input; it never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        backward: BackwardFn,
    ) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                debug_assert!(std::ptr::eq(p.tape, self), "mixing tapes");
                nodes[p.id].requires_grad
            })
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.sweep(loss, None)
    }

    /// Like [`Tape::backward`], but skips every branch that cannot reach one of
    /// `targets`. Gradients for nodes outside those paths are absent.
    pub fn backward_for(&self, loss: Var<'_>, targets: &[Var<'_>]) -> Result<Gradients> {
        self.sweep(loss, Some(targets))
    }

    fn sweep(&self, loss: Var<'_>, targets: Option<&[Var<'_>]>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let count = loss.id + 1;
        // Forward mark of nodes that depend on a target.
        let relevant: Vec<bool> = match targets {
            None => nodes[..count].iter().map(|n| n.requires_grad).collect(),
            Some(ts) => {
                let mut mark = vec![false; count];
                for t in ts {
                    if t.id < count && nodes[t.id].requires_grad {
                        mark[t.id] = true;
                    }
                }
                for i in 0..count {
                    if !mark[i] && nodes[i].requires_grad {
                        mark[i] = nodes[i].parents.iter().any(|&p| mark[p]);
                    }
                }
                mark
            }
        };

        let mut grads: Vec<Option<Tensor>> = (0..count).map(|_| None).collect();
        if relevant[loss.id] {
            grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        }
        for id in (0..count).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| relevant[p]).collect();
            if needs.iter().any(|&n| n) {
                let inputs: Vec<Rc<Tensor>> =
                    node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
                let parent_grads = backward(&Backward {
                    grad: &grad,
                    inputs: &inputs,
                    output: &node.value,
                    needs: &needs,
                });
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let Some(g) = g else { continue };
                    if !need {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        // Leaves keep their accumulated gradient; interior nodes were restored above.
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}

/// Adjoints produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
