//! Named parameter collections shared by every model.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Gradients, Tape, Var};
use crate::rng::RandomSource;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Put every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound<'_> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Bound {
            index: &self.index,
            vars,
        }
    }
}

/// Parameters placed on a tape.
pub struct Bound<'a> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Gradients in store order; parameters the loss did not touch get zeros.
    pub fn gradients<T: Scalar>(&self, tape: &Tape<T>, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
            .collect()
    }
}

/// He-style uniform initialisation scaled by fan-in.
pub fn init_weight<T: Scalar>(rng: &mut RandomSource, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    uniform(rng, shape, bound)
}

pub fn uniform<T: Scalar>(rng: &mut RandomSource, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect())
}

/// Inverted dropout mask with keep-probability `1 - rate`, already rescaled.
pub fn dropout_mask<T: Scalar>(rng: &mut RandomSource, shape: &[usize], rate: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect(),
    )
}
