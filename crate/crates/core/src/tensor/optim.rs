//! Named parameter storage and SGD with classical momentum.

use std::collections::HashMap;

use super::{Graph, Tensor, Var};

#[derive(Debug)]
pub(crate) struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub momentum: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

/// Named parameter tensors with per-parameter momentum buffers.
///
/// Entries keep their insertion order, which fixes the binding order on
/// the graph and the checkpoint layout.
#[derive(Debug, Default)]
pub struct ParamSet {
    pub(crate) entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Graph handles for one [`ParamSet::bind`] call, parallel to the entry order.
pub struct ParamBinding {
    vars: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl ParamBinding {
    /// Assemble a binding from explicit name/var pairs, for harnesses
    /// that splice a checked tensor into one parameter slot.
    pub fn from_parts(names: Vec<String>, vars: Vec<Var>) -> ParamBinding {
        assert_eq!(names.len(), vars.len(), "binding parts must align");
        let by_name = names.into_iter().zip(vars.iter().copied()).collect();
        ParamBinding { vars, by_name }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("no bound parameter named {name:?}"))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name:?}");
        let momentum = vec![0.0; value.numel()];
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, momentum, grad: None });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter named {name:?}"));
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter named {name:?}"));
        &mut self.entries[i].value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn momentum_of(&self, name: &str) -> &[f64] {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter named {name:?}"));
        &self.entries[i].momentum
    }

    pub fn grad_of(&self, name: &str) -> Option<&[f64]> {
        let i = *self.index.get(name)?;
        self.entries[i].grad.as_deref()
    }

    /// Insert every parameter into `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> ParamBinding {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut by_name = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let v = g.parameter(e.value.clone());
            vars.push(v);
            by_name.insert(e.name.clone(), v);
        }
        ParamBinding { vars, by_name }
    }

    /// Copy gradients from a backward pass into the parameter entries.
    pub fn collect_grads(&mut self, g: &Graph, binding: &ParamBinding) {
        assert_eq!(binding.vars.len(), self.entries.len(), "binding does not match this ParamSet");
        for (e, v) in self.entries.iter_mut().zip(&binding.vars) {
            let grad = g
                .grad(*v)
                .unwrap_or_else(|| panic!("contract violation: no gradient for parameter {:?}", e.name));
            match &mut e.grad {
                Some(buf) => buf.copy_from_slice(grad),
                None => e.grad = Some(grad.to_vec()),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// v <- momentum*v + grad + weight_decay*theta; theta <- theta - lr*v.
    ///
    /// Panics if any parameter is missing its gradient.
    pub fn sgd_momentum_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        for e in &mut self.entries {
            let grad = e
                .grad
                .as_ref()
                .unwrap_or_else(|| panic!("contract violation: gradient missing for parameter {:?}", e.name));
            let theta = e.value.data_mut();
            for i in 0..theta.len() {
                let v = momentum * e.momentum[i] + grad[i] + weight_decay * theta[i];
                e.momentum[i] = v;
                theta[i] -= lr * v;
            }
        }
    }

    /// Sum of squared parameter values (the loss regularizer psi).
    pub fn sum_squares(&self) -> f64 {
        let mut acc = 0.0;
        for e in &self.entries {
            for v in e.value.data() {
                acc += v * v;
            }
        }
        acc
    }

    /// Bitwise equality of values and momentum buffers.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.momentum.iter().zip(&b.momentum).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn clone_values(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.value.clone());
        }
        for (dst, src) in out.entries.iter_mut().zip(&self.entries) {
            dst.momentum.copy_from_slice(&src.momentum);
        }
        out
    }
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        self.clone_values()
    }
}
