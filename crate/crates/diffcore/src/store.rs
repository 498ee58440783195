use indexmap::IndexMap;

use crate::error::{invalid, DiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Raw value of one trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named trainable arrays in insertion order.
///
/// The store holds plain values so it can be shared read-only across threads;
/// [`ParameterStore::bind`] turns it into gradient-tracking leaves for one
/// forward/backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T: Scalar = f32> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<()> {
        let name = name.into();
        if numel(shape) != data.len() {
            return Err(invalid(
                "insert",
                format!("`{name}`: shape {shape:?} needs {} elements, got {}", numel(shape), data.len()),
            ));
        }
        if self.params.contains_key(&name) {
            return Err(DiffError::DuplicateParameter(name));
        }
        self.params.insert(name, Param { shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    /// Total number of scalar elements.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Converts every element to another precision.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    let data = p.data.iter().map(|&v| U::lit(v.as_f64())).collect();
                    (k.clone(), Param { shape: p.shape.clone(), data })
                })
                .collect(),
        }
    }

    /// Fresh gradient-tracking leaves for every parameter.
    pub fn bind(&self) -> Bindings<T> {
        let tensors = self
            .params
            .iter()
            .map(|(k, p)| {
                let t = Tensor::param(&p.shape, p.data.clone()).expect("store validates element counts");
                (k.clone(), t)
            })
            .collect();
        Bindings { tensors }
    }

    /// Constant tensors for inference: no graph is recorded through them.
    pub fn bind_frozen(&self) -> Bindings<T> {
        let tensors = self
            .params
            .iter()
            .map(|(k, p)| {
                let t = Tensor::new(&p.shape, p.data.clone()).expect("store validates element counts");
                (k.clone(), t)
            })
            .collect();
        Bindings { tensors }
    }
}

/// Leaf tensors for one forward/backward pass over a [`ParameterStore`].
pub struct Bindings<T: Scalar = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Bindings<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| DiffError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Gradients accumulated so far; parameters the loss never reached get zeros.
    pub fn gradients(&self) -> Gradients<T> {
        Gradients {
            grads: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()])))
                .collect(),
        }
    }
}

/// Per-parameter gradient buffers, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    grads: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParameterStore<T>) -> Self {
        Self {
            grads: store.iter().map(|(k, p)| (k.to_string(), vec![T::zero(); p.data.len()])).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Elementwise sum; parameters are matched by name.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (name, g) in &other.grads {
            let dst = self.grads.get_mut(name).ok_or_else(|| DiffError::UnknownParameter(name.clone()))?;
            if dst.len() != g.len() {
                return Err(invalid("accumulate", format!("`{name}` has {} vs {} elements", dst.len(), g.len())));
            }
            dst.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.grads.values_mut().flatten().for_each(|v| *v = *v * factor);
    }

    pub fn global_norm(&self) -> T {
        self.grads.values().flatten().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().flatten().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_ordered() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("b", &[1], vec![0.0]).unwrap();
        s.insert("a", &[2], vec![0.0; 2]).unwrap();
        assert!(matches!(s.insert("a", &[1], vec![0.0]), Err(DiffError::DuplicateParameter(_))));
        assert_eq!(s.names().collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(s.num_scalars(), 3);
    }

    #[test]
    fn untouched_parameters_get_zero_gradients() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("used", &[2], vec![1.0, 2.0]).unwrap();
        s.insert("unused", &[1], vec![5.0]).unwrap();
        let b = s.bind();
        let w = b.get("used").unwrap();
        w.mul(w).unwrap().sum().backward().unwrap();
        let g = b.gradients();
        assert_eq!(g.get("used").unwrap(), &[2.0, 4.0]);
        assert_eq!(g.get("unused").unwrap(), &[0.0]);
        assert!(b.get("missing").is_err());
    }
}
