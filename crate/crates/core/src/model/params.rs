use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Named trainable tensors in a fixed insertion order. The order is part of
/// the checkpoint layout and of the optimizer state layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Model(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a differentiable leaf of `graph`.
    pub fn bind<'g, 's>(&'s self, graph: &'g Graph) -> Bound<'g, 's> {
        Bound {
            store: self,
            vars: self.tensors.iter().map(|t| graph.param(t.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] living on one graph.
pub struct Bound<'g, 's> {
    store: &'s ParamStore,
    vars: Vec<Var<'g>>,
}

impl<'g, 's> Bound<'g, 's> {
    /// Uses existing leaves (one per parameter, in store order) instead of
    /// fresh copies.
    pub fn from_vars(store: &'s ParamStore, vars: Vec<Var<'g>>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Model(format!(
                "expected {} parameter leaves, got {}",
                store.len(),
                vars.len()
            )));
        }
        Ok(Self { store, vars })
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    }

    /// Gradients after backward, aligned with the store order; parameters
    /// that did not take part get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.value().shape())))
            .collect()
    }
}

/// Seeded initializer: linears draw weights and biases from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, layer norms start at gain 1, bias 0.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Initializer<'_> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive dims")
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(&[fan_in, fan_out], bound);
        let b = self.uniform(&[1, fan_out], bound);
        self.store.insert(format!("{prefix}.w"), w)?;
        self.store.insert(format!("{prefix}.b"), b)
    }

    /// Weight only, no bias.
    pub fn matrix(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = self.uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        self.store.insert(name, w)
    }

    pub fn vector(&mut self, name: &str, len: usize, bound: f64) -> Result<()> {
        let v = self.uniform(&[1, len], bound);
        self.store.insert(name, v)
    }

    pub fn layernorm(&mut self, prefix: &str, width: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.g"), Tensor::ones(&[1, width]))?;
        self.store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, width]))
    }
}

/// `x W + b` with weights named `{prefix}.w` / `{prefix}.b`.
pub fn linear<'g>(p: &Bound<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(x.matmul(&w)?.add_row(&b)?)
}

pub fn layernorm<'g>(p: &Bound<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let g = p.get(&format!("{prefix}.g"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(x.layernorm(&g, &b, crate::tensor::kernels::LAYERNORM_EPS)?)
}
