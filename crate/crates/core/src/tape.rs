//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable op pushes one node holding its output value, the ids
//! of its inputs and a [`Backward`] rule. Nodes are only ever appended, so
//! creation order is a topological order and `backward` is a single reverse
//! sweep. A tape is single-threaded; build one per forward pass.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Shape, Tensor};

/// Values handed to a backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [Rc<Tensor>],
    pub output: &'a Tensor,
    pub grad_out: &'a [f32],
}

/// Vector-Jacobian product of one recorded op.
///
/// Returns one entry per input, in input order; `None` means the op does not
/// propagate to that input. Returned buffers must match the input's length.
pub trait Backward {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f32>>>>;
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    macs: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
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

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let requires_grad = t.requires_grad;
        self.push(Node { value: Rc::new(t), inputs: Vec::new(), op: None, requires_grad, param: None })
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a parameter leaf; its gradient is routed back by
    /// [`Grads::accumulate_into`].
    pub fn param(&self, params: &ParamSet, id: ParamId) -> Var<'_> {
        let mut value = params.get(id).tensor.clone();
        value.grad = None;
        value.requires_grad = true;
        self.push(Node { value: Rc::new(value), inputs: Vec::new(), op: None, requires_grad: true, param: Some(id) })
    }

    /// Appends the result of an op. The backward rule is kept only when some
    /// input requires a gradient.
    pub fn record<B: Backward + 'static>(&self, value: Tensor, inputs: &[Var<'_>], op: B) -> Var<'_> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let op: Option<Box<dyn Backward>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.push(Node { value: Rc::new(value), inputs: ids, op, requires_grad, param: None })
    }

    /// Adds to the multiply-accumulate counter (convolutions report here).
    pub fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let shape = loss.shape();
        if !shape.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {shape}")));
        }
        self.backward_from(loss, &[1.0])
    }

    /// Backpropagates an arbitrary output cotangent `seed`.
    pub fn backward_from(&self, out: Var<'_>, seed: &[f32]) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if seed.len() != nodes[out.id].value.numel() {
            return Err(Error::shape(format!(
                "seed length {} does not match output {}",
                seed.len(),
                nodes[out.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; out.id + 1];
        grads[out.id] = Some(seed.to_vec());
        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            let (Some(op), Some(g)) = (&node.op, grads[id].as_ref()) else { continue };
            let inputs: Vec<Rc<Tensor>> = node.inputs.iter().map(|&i| Rc::clone(&nodes[i].value)).collect();
            let ctx = BackwardCtx { inputs: &inputs, output: &node.value, grad_out: g };
            let input_grads = op.backward(&ctx)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Contract(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (&input, g_in) in node.inputs.iter().zip(input_grads) {
                let Some(g_in) = g_in else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                if g_in.len() != nodes[input].value.numel() {
                    return Err(Error::Contract(format!("{} produced a gradient of the wrong length", op.name())));
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&g_in).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g_in),
                }
            }
        }
        let params = nodes[..=out.id].iter().enumerate().filter_map(|(i, n)| n.param.map(|p| (i, p))).collect();
        let shapes = nodes[..=out.id].iter().map(|n| n.value.shape()).collect();
        Ok(Grads { grads, params, shapes })
    }
}

/// Gradients produced by one backward sweep, indexed by tape node.
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(usize, ParamId)>,
    shapes: Vec<Shape>,
}

impl Grads {
    /// Gradient with respect to `v`, if any flowed to it.
    pub fn wrt(&self, v: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Tensor::from_vec(self.shapes[v.id], g.clone()).ok()
    }

    /// Adds every parameter leaf's gradient into `params`. A parameter used
    /// by several leaves receives the sum.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<()> {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                params.get_mut(id).tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
