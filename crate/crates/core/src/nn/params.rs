use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::rng::SeededRng;
use crate::tensor::{Float, Tensor};

/// Adam moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
}

/// Named trainable tensors in registration order, plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    pub(crate) params: IndexMap<String, Tensor<T>>,
    pub(crate) adam: IndexMap<String, AdamState<T>>,
}

impl<T: Float> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: IndexMap::new(),
            adam: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn adam_state(&self, name: &str) -> Option<&AdamState<T>> {
        self.adam.get(name)
    }

    pub fn set_adam_state(&mut self, name: &str, state: AdamState<T>) -> Result<()> {
        let numel = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?
            .numel();
        if state.first_moment.len() != numel || state.second_moment.len() != numel {
            return Err(Error::Config(format!("optimizer state size mismatch for {name}")));
        }
        self.adam.insert(name.to_string(), state);
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParameterStore<U> {
        let cast_vec = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            adam: self
                .adam
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        AdamState {
                            first_moment: cast_vec(&s.first_moment),
                            second_moment: cast_vec(&s.second_moment),
                            step: s.step,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Adds every parameter to `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.parameter(v.clone())))
                .collect(),
        }
    }

    /// Binds parameters as constants, for inference.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }

    /// Replaces values from a flat list in registration order.
    pub fn load_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for ((name, slot), v) in self.params.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
            *slot = v;
        }
        Ok(())
    }
}

/// Graph handles for the parameters of one forward pass.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }
}

/// Per-parameter gradients keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn new() -> Self {
        Gradients {
            grads: IndexMap::new(),
        }
    }

    /// Gathers gradients for every parameter in `store`; parameters the loss
    /// does not depend on get zeros.
    pub fn collect(store: &ParameterStore<T>, bound: &BoundParams, grads: &mut Grads<T>) -> Self {
        let mut out = IndexMap::with_capacity(store.len());
        for (name, value) in store.iter() {
            let g = bound
                .vars
                .get(name)
                .and_then(|&v| grads.take(v))
                .unwrap_or_else(|| Tensor::zeros(value.shape()));
            out.insert(name.to_string(), g);
        }
        Gradients { grads: out }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }

    pub(crate) fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
}

impl<T: Float> Default for Gradients<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn init_uniform<T: Float>(shape: &[usize], bound: f64, rng: &mut SeededRng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.uniform_range(-bound, bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub(crate) fn init_normal<T: Float>(shape: &[usize], std: f64, rng: &mut SeededRng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(std * rng.normal()))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
