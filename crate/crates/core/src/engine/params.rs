use std::collections::HashMap;

use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of the parameters whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (_, name, tensor) in other.iter() {
            let Some(mine) = self.id(name) else {
                return Err(Error::InvalidArgument(format!("unknown parameter {name:?}")));
            };
            if self.get(mine).shape() != tensor.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!(
                        "parameter {name:?} has shape {:?}, checkpoint has {:?}",
                        self.get(mine).shape(),
                        tensor.shape()
                    ),
                ));
            }
            *self.get_mut(mine) = tensor.clone();
        }
        if other.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} parameters, model has {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// One gradient tensor per parameter, in store order.
#[derive(Clone, Debug)]
pub struct GradStore<T: Scalar = f32> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        GradStore {
            grads: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn from_tensors(grads: Vec<Tensor<T>>) -> Self {
        GradStore { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.grads
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Add another gradient set (same layout) into this one.
    pub fn accumulate(&mut self, other: &GradStore<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            g.scale_in_place(factor);
        }
    }

    pub fn global_norm(&self) -> T {
        global_norm(&self.grads)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

/// Joint L2 norm over a list of tensors, accumulated in `f64`.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> T {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum();
    T::from_f64_lossy(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[3])).is_err());
        assert_eq!(s.scalar_count(), 2);
    }
}
