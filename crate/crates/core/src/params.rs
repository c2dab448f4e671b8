//! Named parameter storage and initialisers.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{DiffArray, Real, Tape, Var};
use crate::error::{Error, Result};

/// Ordered collection of named tensors. Names follow
/// `<module>.<block_index>.<param>`; insertion order is the serialization
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    arrays: Vec<DiffArray<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), arrays: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: DiffArray<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.arrays.len());
        self.names.push(name);
        self.arrays.push(array);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&DiffArray<T>> {
        self.index
            .get(name)
            .map(|&i| &self.arrays[i])
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DiffArray<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.arrays[i]),
            None => Err(Error::Config(format!("missing parameter `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray<T>)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DiffArray<T>)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter_mut())
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(DiffArray::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            arrays: self.arrays.iter().map(DiffArray::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter on the tape as a leaf; `trainable` decides
    /// which ones receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = HashMap::with_capacity(self.len());
        for (name, array) in self.iter() {
            let leaf = array.clone().with_grad(trainable(name));
            vars.insert(name.to_string(), tape.leaf(&leaf));
        }
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("parameter `{name}` not bound")))
    }

    /// Points `name` at another tape node, e.g. a probe variable in a
    /// gradient check.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(v) => {
                *v = var;
                Ok(())
            }
            None => Err(Error::Config(format!("parameter `{name}` not bound"))),
        }
    }
}

/// He-uniform: U(−√(6/fan_in), √(6/fan_in)).
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> DiffArray<T> {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// U(−bound, bound).
pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> DiffArray<T> {
    DiffArray::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

pub fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> DiffArray<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    DiffArray::from_fn(shape, |_| T::lit(dist.sample(rng)))
}
