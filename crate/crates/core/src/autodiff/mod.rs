//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] runs eagerly and, when any input requires a
//! gradient, appends a node holding its vector-Jacobian product to the
//! [`Tape`]. Nodes are appended in execution order, so walking them backwards
//! is a valid backpropagation order. Only first-order derivatives are
//! supported.
//!
//! A tape is single-threaded (`Rc` inside). Independent samples can be
//! differentiated concurrently by giving each thread its own tape.

mod elementwise;
mod linalg;
mod reduce;
mod shape;
mod spatial;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    finite: bool,
    shape: Vec<usize>,
}

struct TapeState {
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
}

/// Shared handle to an operation record. Cloning the handle does not clone
/// the record.
#[derive(Clone)]
pub struct Tape(Rc<RefCell<TapeState>>);

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let st = self.0.borrow();
        f.debug_struct("Tape")
            .field("nodes", &st.nodes.len())
            .field("recording", &st.recording)
            .finish()
    }
}

/// Location of the first non-finite value recorded on a tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonFinite {
    pub node: usize,
    pub op: &'static str,
    pub shape: Vec<usize>,
}

impl fmt::Display for NonFinite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {} ({}) with shape {:?}", self.node, self.op, self.shape)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that evaluates but never stores backward closures.
    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Tape(Rc::new(RefCell::new(TapeState {
            nodes: Vec::new(),
            recording,
            consumed: false,
        })))
    }

    pub fn is_recording(&self) -> bool {
        self.0.borrow().recording
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        let rg = self.is_recording();
        self.push_node("leaf", value, Vec::new(), None, rg)
    }

    /// Register a value that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node("constant", value, Vec::new(), None, false)
    }

    fn push_node(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        let mut st = self.0.borrow_mut();
        assert!(!st.consumed, "tape already consumed by backward()");
        let id = st.nodes.len();
        st.nodes.push(Node {
            op,
            parents,
            backward,
            requires_grad,
            finite: value.is_finite(),
            shape: value.shape().to_vec(),
        });
        Var {
            tape: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    /// Record the result of an operation together with its vector-Jacobian
    /// product. `backward` receives the output gradient and a mask telling
    /// which parents need a gradient; it returns one entry per parent.
    pub(crate) fn record<F>(&self, op: &'static str, value: Tensor, parents: &[&Var], backward: F) -> Var
    where
        F: FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        for p in parents {
            debug_assert!(Rc::ptr_eq(&p.tape.0, &self.0), "mixing vars from different tapes");
        }
        let requires_grad = self.is_recording() && parents.iter().any(|p| p.requires_grad);
        let ids = parents.iter().map(|p| p.id).collect();
        let bw: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(op, value, ids, bw, requires_grad)
    }

    pub fn first_non_finite(&self) -> Option<NonFinite> {
        let st = self.0.borrow();
        st.nodes.iter().enumerate().find(|(_, n)| !n.finite).map(|(i, n)| NonFinite {
            node: i,
            op: n.op,
            shape: n.shape.clone(),
        })
    }

    /// Backpropagate from a scalar `loss`. Consumes the recorded closures;
    /// the tape cannot be differentiated twice.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !Rc::ptr_eq(&loss.tape.0, &self.0) {
            return Err(Error::contract("loss was recorded on a different tape"));
        }
        let mut st = self.0.borrow_mut();
        if st.consumed {
            return Err(Error::contract("tape already consumed by backward()"));
        }
        st.consumed = true;
        let nodes = std::mem::take(&mut st.nodes);
        drop(st);

        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.shape.clone()).collect();
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if loss.requires_grad {
            grads[loss.id] = Some(Tensor::full(loss.shape(), 1.0));
        }
        let mut mask = Vec::new();
        for (id, node) in nodes.into_iter().enumerate().rev() {
            if id > loss.id {
                continue;
            }
            let Some(bw) = node.backward else { continue };
            // Interior nodes release their gradient once propagated.
            let Some(g) = grads[id].take() else { continue };
            mask.clear();
            mask.extend(node.parents.iter().map(|&p| requires[p]));
            let parent_grads = bw(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), shapes[p].as_slice(), "gradient for parent of {}", node.op);
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Tape::backward`], looked up by the [`Var`] they
/// belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: &Var) -> Tensor {
        self.grads
            .get(v.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

/// A tensor value tracked by a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    value: Tensor,
    requires_grad: bool,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value)
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rank(&self) -> usize {
        self.value.rank()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self) -> Var {
        self.tape.constant(self.value.clone())
    }

    pub(crate) fn unary<F>(&self, op: &'static str, value: Tensor, backward: F) -> Var
    where
        F: FnOnce(&Tensor) -> Tensor + 'static,
    {
        self.tape
            .record(op, value, &[self], move |g, _| vec![Some(backward(g))])
    }
}
