use std::sync::Arc;

use super::{ConvAlgo, Float, Tensor};
use crate::error::{Error, Result};

/// Index of a recorded node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

/// A value produced during a forward pass.
///
/// `node` is `None` for constants and for anything computed while the tape
/// is not recording; such values never receive gradients.
#[derive(Clone, Debug)]
pub struct Var<T: Float = f32> {
    value: Arc<Tensor<T>>,
    node: Option<NodeId>,
}

impl<T: Float> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Self {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_arc(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Self {
        Self {
            value: Arc::clone(&self.value),
            node: None,
        }
    }
}

/// Operator identity, used for mutation testing and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv3d,
    MaxPool3d,
    AvgPool3d,
    Upsample,
    BatchNorm3d,
    Sigmoid,
    Relu,
    Linear,
    SoftmaxCrossEntropy,
    Add,
    Mul,
    AddScalar,
    Scale,
    Sum,
    Reshape,
}

/// Deliberate corruption of one backward rule, for proving that the
/// gradient checker catches broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mutation {
    pub op: OpKind,
    /// Operand slot whose gradient is scaled (conv3d: 0 input, 1 weight, 2 bias).
    pub slot: usize,
    pub factor: f64,
}

impl Mutation {
    /// Weight gradient of every conv3d scaled by two.
    pub fn conv3d_weight() -> Self {
        Self {
            op: OpKind::Conv3d,
            slot: 1,
            factor: 2.0,
        }
    }
}

pub(crate) trait Backward<T: Float>: Send + Sync {
    fn kind(&self) -> OpKind;

    /// Input node per operand slot.
    fn inputs(&self) -> &[Option<NodeId>];

    /// Gradient per operand slot; slots without an input node get `None`.
    fn backward(&self, grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>>;
}

struct Node<T: Float> {
    op: Option<Box<dyn Backward<T>>>,
    numel: usize,
    retain: bool,
    param: Option<usize>,
}

/// Records operations in execution order and replays them in reverse.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    recording: bool,
    consumed: bool,
    mutation: Option<Mutation>,
    conv_algo: ConvAlgo,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            consumed: false,
            mutation: None,
            conv_algo: ConvAlgo::Im2col,
        }
    }

    /// A tape that records nothing; every op returns a constant.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv_algo(&self) -> ConvAlgo {
        self.conv_algo
    }

    pub fn set_conv_algo(&mut self, algo: ConvAlgo) {
        self.conv_algo = algo;
    }

    pub fn set_mutation(&mut self, mutation: Option<Mutation>) {
        self.mutation = mutation;
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var::constant(value)
    }

    /// A differentiable input whose gradient is kept after `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var<T> {
        self.push_leaf(value, None)
    }

    /// A leaf bound to parameter slot `index` of some parameter store.
    pub fn param(&mut self, index: usize, value: Arc<Tensor<T>>) -> Var<T> {
        self.push_leaf_shared(value, Some(index))
    }

    fn push_leaf(&mut self, value: Tensor<T>, param: Option<usize>) -> Var<T> {
        self.push_leaf_shared(Arc::new(value), param)
    }

    fn push_leaf_shared(&mut self, value: Arc<Tensor<T>>, param: Option<usize>) -> Var<T> {
        if !self.recording || self.consumed {
            return Var { value, node: None };
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: None,
            numel: value.numel(),
            retain: true,
            param,
        });
        Var {
            value,
            node: Some(id),
        }
    }

    /// Keeps the gradient of an intermediate value after `backward`.
    pub fn retain_grad(&mut self, var: &Var<T>) {
        if let Some(id) = var.node {
            self.nodes[id.0].retain = true;
        }
    }

    pub(crate) fn record<B: Backward<T> + 'static>(&mut self, value: Tensor<T>, op: B) -> Var<T> {
        self.record_shared(Arc::new(value), op)
    }

    pub(crate) fn record_shared<B: Backward<T> + 'static>(
        &mut self,
        value: Arc<Tensor<T>>,
        op: B,
    ) -> Var<T> {
        debug_assert!(
            value.all_finite(),
            "{:?} produced a non-finite value",
            op.kind()
        );
        let needed = op.inputs().iter().any(Option::is_some);
        if !self.recording || self.consumed || !needed {
            return Var { value, node: None };
        }
        let id = NodeId(self.nodes.len());
        debug_assert!(op.inputs().iter().flatten().all(|i| i.0 < id.0));
        self.nodes.push(Node {
            op: Some(Box::new(op)),
            numel: value.numel(),
            retain: false,
            param: None,
        });
        Var {
            value,
            node: Some(id),
        }
    }

    /// Back-propagates from a one-element loss.
    pub fn backward(&mut self, loss: &Var<T>) -> Result<()> {
        if loss.value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward() needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        self.backward_with_seed(loss, &[T::one()])
    }

    /// Back-propagates from `out` with an explicit upstream gradient.
    pub fn backward_with_seed(&mut self, out: &Var<T>, seed: &[T]) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by backward()".into()));
        }
        let root = out.node.ok_or_else(|| {
            Error::Tape("output does not depend on any value that requires grad".into())
        })?;
        if seed.len() != out.value.numel() {
            return Err(Error::Tape(format!(
                "seed has {} elements, output has {}",
                seed.len(),
                out.value.numel()
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(seed.to_vec());

        for i in (0..=root.0).rev() {
            let Some(op) = self.nodes[i].op.take() else {
                continue;
            };
            let retain = self.nodes[i].retain;
            let grad_out = if retain {
                self.grads[i].clone()
            } else {
                self.grads[i].take()
            };
            let Some(grad_out) = grad_out else {
                continue;
            };
            let mut input_grads = op.backward(&grad_out)?;
            if let Some(m) = self.mutation.filter(|m| m.op == op.kind()) {
                if let Some(Some(g)) = input_grads.get_mut(m.slot) {
                    let f = T::of(m.factor);
                    g.iter_mut().for_each(|v| *v *= f);
                }
            }
            for (slot, g) in input_grads.into_iter().enumerate() {
                let (Some(g), Some(Some(target))) = (g, op.inputs().get(slot)) else {
                    continue;
                };
                debug_assert_eq!(g.len(), self.nodes[target.0].numel);
                match &mut self.grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    empty => *empty = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Gradient of the last backward pass with respect to `var`.
    pub fn grad(&self, var: &Var<T>) -> Option<Tensor<T>> {
        let id = var.node?;
        let g = self.grads.get(id.0)?.as_ref()?;
        Tensor::new(var.shape(), g.clone()).ok()
    }

    pub fn grad_slice(&self, var: &Var<T>) -> Option<&[T]> {
        let id = var.node?;
        self.grads.get(id.0)?.as_deref()
    }

    /// `(parameter slot, gradient)` for every parameter leaf reached by backward.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            let p = n.param?;
            let g = self.grads.get(i)?.as_deref()?;
            Some((p, g))
        })
    }
}
