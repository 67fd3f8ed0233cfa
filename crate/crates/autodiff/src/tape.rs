//! The recording tape and the variables that live on it.
//!
//! Nodes are appended in evaluation order, so node ids are already a topological
//! order. Backward passes are expressed with the same primitives as forward
//! passes; when `create_graph` is set they are recorded like any other
//! computation, which is what makes gradients of gradients available.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::backward;
use crate::error::{AutodiffError, Result};

pub type Array = ArrayD<f64>;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Relu(usize),
    SumTo(usize),
    BroadcastTo(usize),
    Reshape(usize),
    Transpose(usize),
    MatMul(usize, usize),
    Conv1d { x: usize, w: usize, pad_left: usize },
    Conv1dInputGrad { g: usize, w: usize, pad_left: usize },
    Conv1dWeightGrad { x: usize, g: usize, pad_left: usize },
    Gather { x: usize, index: Rc<[usize]> },
    ScatterAdd { g: usize, index: Rc<[usize]> },
    ConcatChannels { parts: Rc<[usize]> },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | Offset(a) | Exp(a) | Log(a) | Sqrt(a) | Sigmoid(a)
            | Tanh(a) | Softplus(a) | Relu(a) | SumTo(a) | BroadcastTo(a) | Reshape(a)
            | Transpose(a) => vec![a],
            Conv1d { x, w, .. } => vec![x, w],
            Conv1dInputGrad { g, w, .. } => vec![g, w],
            Conv1dWeightGrad { x, g, .. } => vec![x, g],
            Gather { x, .. } => vec![x],
            ScatterAdd { g, .. } => vec![g],
            ConcatChannels { ref parts } => parts.to_vec(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Rc<Array>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    recording: bool,
}

/// A record of one computation. Cloning a `Tape` yields another handle to the
/// same record.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                recording: true,
            })),
        }
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Array) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    /// Turns operation recording on or off, returning the previous state.
    /// With recording off every new node is a constant.
    pub fn set_recording(&self, on: bool) -> bool {
        std::mem::replace(&mut self.inner.borrow_mut().recording, on)
    }

    /// Runs `f` with recording disabled.
    pub fn no_grad<T>(&self, f: impl FnOnce() -> T) -> T {
        let prev = self.set_recording(false);
        let out = f();
        self.set_recording(prev);
        out
    }

    fn push_leaf(&self, value: Array, requires_grad: bool) -> Var {
        self.push_node(Rc::new(value), Op::Leaf, requires_grad)
    }

    fn push_node(&self, value: Rc<Array>, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Appends the result of a primitive. The node keeps its op only when
    /// recording is on and some parent requires a gradient.
    pub(crate) fn push_op(&self, value: Array, op: Op) -> Var {
        let requires_grad = {
            let inner = self.inner.borrow();
            inner.recording && op.parents().iter().any(|&p| inner.nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(Rc::new(value), op, requires_grad)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    pub(crate) fn op_of(&self, id: usize) -> Op {
        self.inner.borrow().nodes[id].op.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    pub(crate) fn handle(&self, id: usize) -> Var {
        Var {
            tape: self.clone(),
            id,
        }
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// A handle to one node of a [`Tape`].
#[derive(Clone)]
pub struct Var {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The single entry of a one-element variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a variable with {} entries", v.len());
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// A constant with the same value; gradients stop here.
    pub fn detach(&self) -> Var {
        let value = self.value();
        self.tape.push_node(value, Op::Leaf, false)
    }
}

/// Gradients of a scalar `loss` with respect to each of `wrt`.
///
/// Variables that `loss` does not depend on get a zero gradient. With
/// `create_graph` the backward computation is recorded, so the returned
/// variables can be differentiated again; otherwise they are constants.
pub fn grad(loss: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
    let tape = loss.tape.clone();
    let loss_value = loss.value();
    if loss_value.len() != 1 {
        return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
    }
    for w in wrt {
        assert!(tape.same(&w.tape), "grad: variables belong to different tapes");
    }

    let end = loss.id + 1;
    let lo = wrt.iter().map(|w| w.id).min().unwrap_or(end).min(end);

    // Nodes on some path from a `wrt` variable to the loss.
    let mut relevant = vec![false; end - lo];
    {
        let inner = tape.inner.borrow();
        for w in wrt {
            if w.id < end {
                relevant[w.id - lo] = true;
            }
        }
        for id in lo..end {
            if relevant[id - lo] {
                continue;
            }
            let node = &inner.nodes[id];
            if node.requires_grad
                && node
                    .op
                    .parents()
                    .iter()
                    .any(|&p| p >= lo && relevant[p - lo])
            {
                relevant[id - lo] = true;
            }
        }
    }

    let prev = tape.set_recording(create_graph);
    let result = (|| {
        let mut grads: Vec<Option<Var>> = vec![None; end - lo];
        if relevant[loss.id - lo] {
            grads[loss.id - lo] =
                Some(tape.constant(ArrayD::from_elem(loss_value.raw_dim(), 1.0)));
        }
        for id in (lo..end).rev() {
            if !relevant[id - lo] {
                continue;
            }
            let Some(g) = grads[id - lo].clone() else {
                continue;
            };
            let op = tape.op_of(id);
            let wanted: Vec<bool> = op
                .parents()
                .iter()
                .map(|&p| p >= lo && relevant[p - lo])
                .collect();
            if !wanted.iter().any(|&x| x) {
                continue;
            }
            let contributions = backward::vjp(&tape, id, &op, &g, &wanted)?;
            for (parent, contribution) in contributions {
                let slot = &mut grads[parent - lo];
                *slot = Some(match slot.take() {
                    None => contribution,
                    Some(acc) => acc.add(&contribution)?,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.id.wrapping_sub(lo)).cloned().flatten() {
                Some(g) if w.id < end => Ok(g),
                _ => Ok(tape.constant(ArrayD::zeros(w.value().raw_dim()))),
            })
            .collect::<Result<Vec<_>>>()
    })();
    tape.set_recording(prev);
    result
}
