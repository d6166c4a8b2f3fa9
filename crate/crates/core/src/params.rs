//! Named parameter storage and its binding onto a tape.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered map from parameter name to value. Iteration order is insertion
/// order, which fixes the layout of checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Replaces every value with the one of the same name in `other`,
    /// requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", self.len(), other.len())));
        }
        for (name, value) in self.map.iter_mut() {
            let src = other.get(name).map_err(|_| Error::Format(format!("checkpoint lacks `{name}`")))?;
            src.expect_shape(value.shape(), name)?;
            *value = src.clone();
        }
        Ok(())
    }

    /// Affine weight `(fan_in, fan_out)` drawn from `U(−1/√fan_in, 1/√fan_in)`
    /// and a zero bias.
    pub fn init_affine(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert(format!("{prefix}.weight"), Tensor::from_fn(&[fan_in, fan_out], |_| rng.uniform(-bound, bound)));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
    }

    /// Unit gain and zero shift.
    pub fn init_norm(&mut self, prefix: &str, width: usize) {
        self.insert(format!("{prefix}.gain"), Tensor::full(&[width], 1.0));
        self.insert(format!("{prefix}.shift"), Tensor::zeros(&[width]));
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Contract(format!("unbound parameter `{name}`")))
    }

    /// Gradients in store order, zero-filled where the loss does not depend
    /// on a parameter.
    pub fn collect(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|(name, var)| {
                grads.take(*var).unwrap_or_else(|| Tensor::zeros(store.get(name).expect("bound from store").shape()))
            })
            .collect()
    }
}

impl Tape {
    /// `x·W + b` with parameters `{prefix}.weight` and `{prefix}.bias`.
    pub fn linear(&mut self, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let w = params.get(&format!("{prefix}.weight"))?;
        let b = params.get(&format!("{prefix}.bias"))?;
        self.affine(x, w, b)
    }

    /// Layer norm with parameters `{prefix}.gain` and `{prefix}.shift`.
    pub fn norm(&mut self, params: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var> {
        let g = params.get(&format!("{prefix}.gain"))?;
        let s = params.get(&format!("{prefix}.shift"))?;
        self.layer_norm(x, g, s, eps)
    }
}
