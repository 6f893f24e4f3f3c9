use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Tensor`] allocation.
///
/// A tape binds each identity to at most one leaf node, so a tensor used at
/// several depths (cross-layer sharing) accumulates all of its gradient
/// contributions in one place. Cloning a tensor yields a fresh identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug)]
pub struct Tensor<T> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<T>,
    /// Populated from a backward pass; always the same length as `data`.
    pub grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Clone> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            id: TensorId::fresh(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} needs {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor {
            id: TensorId::fresh(),
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            id: TensorId::fresh(),
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    /// Samples i.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Tensor {
            id: TensorId::fresh(),
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn id(&self) -> TensorId {
        self.id
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Overwrites values with `src` (same shape), keeping identity and flags.
    pub fn assign(&mut self, src: &Tensor<T>) -> Result<()> {
        if src.shape != self.shape {
            return Err(shape_err(
                "assign",
                format!("{:?} vs {:?}", self.shape, src.shape),
            ));
        }
        self.data.copy_from_slice(&src.data);
        Ok(())
    }

    /// Converts element type, preserving values exactly when widening.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            id: TensorId::fresh(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    /// Hash of the shape and exact bit patterns of the values.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        checksum_into(&mut h, self);
        h.finish()
    }

    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

pub(crate) fn checksum_into<T: Scalar, H: Hasher>(h: &mut H, t: &Tensor<T>) {
    h.write_usize(t.shape.len());
    for &d in &t.shape {
        h.write_usize(d);
    }
    for v in &t.data {
        h.write_u64(v.as_f64().to_bits());
    }
}

/// Combined checksum of a list of named tensors (order-sensitive).
pub fn checksum_all<'a, T: Scalar>(tensors: impl IntoIterator<Item = (String, &'a Tensor<T>)>) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, t) in tensors {
        h.write(name.as_bytes());
        checksum_into(&mut h, t);
    }
    h.finish()
}
