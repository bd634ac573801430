use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Insertion order is preserved and defines the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Replaces a tensor; the new value must keep the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let old = &self.tensors[id.0];
        if old.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamSet::set",
                lhs: old.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Whether every tensor is bitwise identical to the other set's.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }

    /// Leaves for every parameter in `graph`, trainable when the graph records.
    pub fn bind<'g>(&self, graph: &'g Graph<F>) -> Bound<'g, F> {
        Bound {
            vars: self.tensors.iter().map(|t| graph.param(t.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamSet`] placed into one graph.
pub struct Bound<'g, F: Real = f32> {
    vars: Vec<Var<'g, F>>,
}

impl<'g, F: Real> Bound<'g, F> {
    pub fn get(&self, id: ParamId) -> Var<'g, F> {
        self.vars[id.0]
    }

    /// Substitutes another variable for one parameter, e.g. to probe it
    /// with a finite-difference check.
    pub fn replace(&mut self, id: ParamId, var: Var<'g, F>) {
        self.vars[id.0] = var;
    }

    /// Gradient per parameter after `backward`, in parameter order.
    pub fn grads(&self) -> Vec<Option<Tensor<F>>> {
        self.vars.iter().map(Var::grad).collect()
    }
}

/// Parameter initialisers used across the model.
pub(crate) struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform<F: Real>(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<F> {
        Tensor::from_fn(shape, |_| F::of(self.rng.gen_range(-bound..bound)))
    }

    /// Glorot-style uniform init for a `[fan_in × fan_out]` matrix.
    pub fn xavier<F: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<F> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(vec![fan_in, fan_out], bound)
    }
}
