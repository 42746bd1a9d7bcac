//! Named parameter collections and their binding into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted names such as `encoder.block0.attn.wq`.
/// Iteration order is the sorted key order, which keeps every
/// traversal (initialisation, optimiser, checkpoint) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> ParamStore {
        let params = self
            .params
            .iter()
            .map(|(k, t)| {
                let z = Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()])
                    .expect("shape copied from a valid tensor");
                (k.clone(), z)
            })
            .collect();
        ParamStore { params }
    }

    /// Element-wise `self += other * s` over matching names.
    pub fn add_scaled(&mut self, other: &ParamStore, s: f64) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::dim("add_scaled", name.clone()));
            }
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += s * b;
            }
        }
        Ok(())
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, true)
    }

    /// Adds every parameter to `g` as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Gradient for every bound parameter; zeros where none flowed.
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> ParamStore {
        let params = self
            .vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, g.value(v))))
            .collect();
        ParamStore { params }
    }
}

/// Uniform `(-bound, bound)` matrix.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized from rows*cols")
}

/// Linear layer `[in, out]` weight plus `[1, out]` bias, fan-in scaled.
pub(crate) fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), uniform(rng, fan_in, fan_out, bound));
    store.insert(format!("{prefix}.bias"), uniform(rng, 1, fan_out, bound));
}
