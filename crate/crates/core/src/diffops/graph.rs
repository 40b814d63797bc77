//! Recording graph for reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and an adjoint rule.
//! [`Graph::backward`] walks the nodes in exact reverse of recording order,
//! accumulating adjoints additively into each input.

use std::collections::{BTreeMap, HashMap};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Adjoint rule of a recorded operation.
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one adjoint per input (`None` when the input receives nothing).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::validation(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// First parameter (by name) holding a non-finite value, with its flat index.
    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        self.tensors
            .iter()
            .find_map(|(k, t)| t.data().iter().position(|x| !x.is_finite()).map(|i| (k.clone(), i)))
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
    /// Node ids in the order their adjoint rules ran.
    pub visit_order: Vec<usize>,
}

impl Gradients {
    /// Adjoint of `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, zeros when nothing flowed.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Adjoints of every bound parameter, zero-filled where unreached.
    pub fn params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.params {
            out.insert(name.clone(), self.get_or_zero(v));
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&v| self.get_or_zero(v))
    }
}

/// A single-threaded recording of operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    param_lookup: HashMap<usize, String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of parameters bound into this graph.
    pub fn bound_params(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_name(&self, v: Var) -> Option<&str> {
        self.param_lookup.get(&v.0).map(String::as_str)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, inputs: vec![], op: None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Differentiable leaf. Binding the same name twice returns the same node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node { value: t.clone(), inputs: vec![], op: None, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        self.param_lookup.insert(v.0, name.to_string());
        v
    }

    /// Binds a parameter from a store.
    pub fn bind(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.require(name)?;
        Ok(self.param(name, t))
    }

    /// Records a custom operation.
    pub fn push(&mut self, value: Tensor, inputs: &[Var], op: Box<dyn Backward>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, inputs: inputs.to_vec(), op: Some(op), requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that blocks adjoints.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.nodes.push(Node { value, inputs: vec![v], op: None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut visit_order = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            visit_order.push(i);
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &g)?;
            grads[i] = Some(g);
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Numeric(format!(
                    "op {} returned {} adjoints for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                if ig.len() != self.nodes[inp.0].value.len() {
                    return Err(Error::shape(op.name(), ig.shape(), self.nodes[inp.0].value.shape()));
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig.reshape(self.nodes[inp.0].value.shape())?),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visit_order,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_binding_is_idempotent() {
        let mut g = Graph::new();
        let t = Tensor::scalar(2.0);
        let a = g.param("a", &t);
        let b = g.param("a", &t);
        assert_eq!(a, b);
        assert_eq!(g.bound_params(), vec!["a".to_string()]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.param("a", &Tensor::zeros(&[2]));
        assert!(g.backward(a).is_err());
    }
}
