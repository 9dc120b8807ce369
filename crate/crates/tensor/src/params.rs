use crate::error::{Result, TensorError};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in registration order.
///
/// Registration order is the architecture order and is what checkpoints
/// serialize, so it must not depend on anything but the model config.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal initialisation with standard deviation `sqrt(2 / fan_in)`.
    pub fn add_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut RngState) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::lit(std * rng.normal()));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Overwrites values from `(name, tensor)` entries, which must match this
    /// store's names and shapes exactly and in order.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(TensorError::invalid(
                "load_entries",
                format!("expected {} tensors, got {}", self.values.len(), entries.len()),
            ));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(TensorError::invalid(
                    "load_entries",
                    format!("tensor {i}: expected `{}`, got `{name}`", self.names[i]),
                ));
            }
            if t.shape() != self.values[i].shape() {
                return Err(TensorError::shape(
                    "load_entries",
                    format!("{:?} for `{name}`", self.values[i].shape()),
                    t.shape(),
                ));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}
