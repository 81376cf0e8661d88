use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
///
/// Arrays used as learnable weights carry `requires_grad` and, after a
/// backward pass has been collected, a same-shape `grad`.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> NdArray<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform in `(-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Converts element type, keeping the flags and any gradient.
    pub fn cast<U: Scalar>(&self) -> NdArray<U> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for array of length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }
}

/// Named collection of learnable tensors (one network or encoder).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    tensors: BTreeMap<String, NdArray<T>>,
}

impl<T: Scalar> ParamBlock<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: NdArray<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "tensor {name} already present in block {}",
                self.name
            )));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("{}.{}", self.name, name)));
        }
        self.tensors.insert(name, tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&NdArray<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(format!("{}.{}", self.name, name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut NdArray<T>> {
        let block = &self.name;
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(format!("{block}.{name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NdArray<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut NdArray<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad = None;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamBlock<U> {
        ParamBlock {
            name: self.name.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_length() {
        assert!(NdArray::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let a = NdArray::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn block_rejects_duplicates_and_non_finite() {
        let mut b = ParamBlock::<f64>::new("mlp");
        b.insert("w", NdArray::zeros(&[2, 2])).unwrap();
        assert!(b.insert("w", NdArray::zeros(&[2, 2])).is_err());
        let bad = NdArray::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(matches!(b.insert("x", bad), Err(Error::NonFinite(_))));
        assert!(b.get("w").unwrap().requires_grad);
        assert!(matches!(b.get("nope"), Err(Error::UnknownTensor(_))));
    }

    #[test]
    fn set_grad_checks_length() {
        let mut a = NdArray::<f32>::zeros(&[3]);
        assert!(a.set_grad(vec![0.0; 2]).is_err());
        a.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(a.grad.as_deref(), Some(&[1.0, 1.0, 1.0][..]));
    }
}
