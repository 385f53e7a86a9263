use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::ops::{GatherIndex, Op};
use super::{DiffError, ParamId, ParameterStore, Tensor};

/// A computation context. Model code is written once against this trait and
/// runs either eagerly ([`Eager`], no gradient bookkeeping) or on a
/// recording [`Tape`]. Both evaluate the same kernels, so values agree
/// bit-for-bit between the two.
pub trait Graph {
    type Value: Clone;

    fn apply(&mut self, op: Op, inputs: &[&Self::Value]) -> Result<Self::Value, DiffError>;
    fn constant_arc(&mut self, t: Arc<Tensor>) -> Self::Value;
    fn param(&mut self, store: &ParameterStore, id: ParamId) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;
    fn is_recording(&self) -> bool;

    fn constant(&mut self, t: Tensor) -> Self::Value {
        self.constant_arc(Arc::new(t))
    }

    /// Cuts the gradient path: same value, treated as a constant.
    fn detach(&mut self, v: &Self::Value) -> Self::Value {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::Mul, &[a, b])
    }
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::MatMul, &[a, b])
    }
    fn affine(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::Affine, &[x, w, b])
    }
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::Relu, &[x])
    }
    fn softplus(&mut self, x: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::Softplus, &[x])
    }
    fn tanh(&mut self, x: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::Tanh, &[x])
    }
    fn clip(&mut self, x: &Self::Value, lo: f64, hi: f64) -> Result<Self::Value, DiffError> {
        self.apply(Op::Clip { lo, hi }, &[x])
    }
    fn square(&mut self, x: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::Square, &[x])
    }
    fn scale(&mut self, x: &Self::Value, s: f64) -> Result<Self::Value, DiffError> {
        self.apply(Op::Scale(s), &[x])
    }
    fn add_scalar(&mut self, x: &Self::Value, s: f64) -> Result<Self::Value, DiffError> {
        self.apply(Op::AddScalar(s), &[x])
    }
    /// `1 - x`
    fn one_minus(&mut self, x: &Self::Value) -> Result<Self::Value, DiffError> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(&neg, 1.0)
    }
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::Sum, &[x])
    }
    fn mean(&mut self, x: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::Mean, &[x])
    }
    fn min_reduce(&mut self, x: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::MinReduce, &[x])
    }
    fn max_reduce(&mut self, x: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::MaxReduce, &[x])
    }
    fn concat(&mut self, xs: &[&Self::Value], axis: usize) -> Result<Self::Value, DiffError> {
        self.apply(Op::Concat { axis }, xs)
    }
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value, DiffError> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }
    fn transpose(&mut self, x: &Self::Value) -> Result<Self::Value, DiffError> {
        self.apply(Op::Transpose, &[x])
    }
    fn gather(&mut self, x: &Self::Value, index: &Arc<GatherIndex>) -> Result<Self::Value, DiffError> {
        self.apply(Op::Gather(index.clone()), &[x])
    }
}

/// Evaluates primitives immediately and keeps nothing but the results.
#[derive(Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Value = Arc<Tensor>;

    fn apply(&mut self, op: Op, inputs: &[&Arc<Tensor>]) -> Result<Arc<Tensor>, DiffError> {
        let refs: Vec<&Tensor> = inputs.iter().map(|t| t.as_ref()).collect();
        op.forward(&refs).map(Arc::new)
    }

    fn constant_arc(&mut self, t: Arc<Tensor>) -> Arc<Tensor> {
        t
    }

    fn param(&mut self, store: &ParameterStore, id: ParamId) -> Arc<Tensor> {
        store.value_arc(id)
    }

    fn value<'a>(&'a self, v: &'a Arc<Tensor>) -> &'a Tensor {
        v
    }

    fn is_recording(&self) -> bool {
        false
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct Node {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Wengert list for reverse-mode differentiation. Nodes are appended in
/// evaluation order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(DiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(root_value.shape().to_vec(), 1.0));

        for k in (0..=root.0).rev() {
            let node = &self.nodes[k];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| self.nodes[i].value.as_ref()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let parts = op.backward(&inputs, &node.value, &g, &needs);
            for (&i, part) in node.inputs.iter().zip(parts) {
                let Some(part) = part else { continue };
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&part),
                    slot => *slot = Some(part),
                }
            }
            // Keep gradients of leaves and the caller-visible root only.
            if self.nodes[k].op.is_some() && k != root.0 {
                continue;
            }
            grads[k] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (&id, &var) in &self.params {
            if let Some(Some(g)) = grads.get(var.0) {
                params.insert(id, g.clone());
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: ParamGrads(params),
        })
    }
}

impl Graph for Tape {
    type Value = Var;

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var, DiffError> {
        let refs: Vec<&Tensor> = inputs.iter().map(|v| self.nodes[v.0].value.as_ref()).collect();
        let value = op.forward(&refs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            value: Arc::new(value),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn constant_arc(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value: t,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value: store.value_arc(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn is_recording(&self) -> bool {
        true
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to a leaf (parameter or constant recorded on the tape).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

/// Gradients keyed by parameter, iterated in id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads(BTreeMap<ParamId, Tensor>);

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        self.0.insert(id, g);
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Tensor> {
        self.0.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += scale * other`
    pub fn accumulate(&mut self, other: &ParamGrads, scale: f64) {
        for (id, g) in &other.0 {
            let mut g = g.clone();
            g.scale_assign(scale);
            match self.0.get_mut(id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.0.insert(*id, g);
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }
}
