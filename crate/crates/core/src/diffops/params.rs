use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// How a parameter is initialized when it is registered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    Constant(f64),
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug)]
pub struct ParameterStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl<T: Real> ParameterStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Registers and initializes a parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Constant(c) => vec![T::lit(c); n],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect()
            }
        };
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Tensor::from_vec(shape, data));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(|i| &mut self.values[i])
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total scalar count over parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            index: self.index.clone(),
            rng: self.rng.clone(),
        }
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Graph<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ParameterStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParameterStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &ParameterStore<T> {
        self.params
    }

    /// Leaf for the named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = self.tape.param(self.params.values[i].clone());
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Gradients in parameter order; `None` for parameters the output does
    /// not depend on.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterStore::<f32>::new(0);
        p.register("a", &[2], Init::Constant(0.0)).unwrap();
        assert!(p.register("a", &[2], Init::Constant(0.0)).is_err());
    }

    #[test]
    fn initialization_is_seeded() {
        let build = |seed| {
            let mut p = ParameterStore::<f32>::new(seed);
            p.register("w", &[4, 3], Init::KaimingNormal { fan_in: 3 }).unwrap();
            p.get("w").unwrap().clone()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
    }

    #[test]
    fn unbound_parameters_have_no_gradient() {
        let mut p = ParameterStore::<f64>::new(0);
        p.register("a", &[1], Init::Constant(2.0)).unwrap();
        p.register("b", &[1], Init::Constant(3.0)).unwrap();
        let mut g = Graph::new(&p);
        let a = g.param("a").unwrap();
        let s = g.tape.sum(a);
        let mut grads = g.tape.backward(s).unwrap();
        let pg = g.param_grads(&mut grads);
        assert_eq!(pg[0].as_ref().unwrap().data(), &[1.0]);
        assert!(pg[1].is_none());
    }
}
