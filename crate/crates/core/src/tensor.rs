//! Dense row-major tensors and the scalar trait they are generic over.
//!
//! Training runs in `f32`; gradient verification instantiates the same code
//! with `f64` so finite-difference checks can use tight tolerances.

use std::fmt;

use crate::error::{Error, Result};

/// Scalar element of a [`Tensor`]: `f32` or `f64`.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major numeric array. Immutable by convention once built: every
/// operation returns a fresh tensor, so values can be shared across threads.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} values) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "zip of {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| if v < lo { lo } else if v > hi { hi } else { v })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add of {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Number of leading-dimension items (batch size for `[N,...]` tensors).
    pub fn outer(&self) -> usize {
        *self.shape.first().unwrap_or(&0)
    }

    /// Flat size of one leading-dimension item.
    pub fn item_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Row-major slab of item `n` along the leading dimension.
    pub fn item(&self, n: usize) -> &[T] {
        let il = self.item_len();
        &self.data[n * il..(n + 1) * il]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let il = self.item_len();
        &mut self.data[n * il..(n + 1) * il]
    }
}

/// Row-major flat index into a `[C,H,W]` slab.
#[inline]
pub fn idx3(h: usize, w: usize, c: usize, y: usize, x: usize) -> usize {
    (c * h + y) * w + x
}

/// Row-softmax of `[N,K]` logits, computed with max-subtraction.
///
/// Errors on non-finite inputs; each output row sums to 1 and all entries
/// are strictly positive.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let lp = log_softmax(logits)?;
    Ok(lp.map(|v| v.exp()))
}

/// Row log-softmax of `[N,K]` logits with max-subtraction.
pub fn log_softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "softmax expects [N,K] logits, got {:?}",
            logits.shape()
        )));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("non-finite logits".into()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row
            .iter()
            .map(|&v| (v - max).exp())
            .fold(T::zero(), |a, b| a + b)
            .ln();
        for j in 0..k {
            out.data_mut()[i * k + j] = row[j] - max - lse;
        }
    }
    Ok(out)
}

/// Per-row argmax of `[N,K]` logits; ties go to the lowest class index.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One-hot `[N,K]` tensor from class labels.
pub fn one_hot<T: Element>(labels: &[u8], classes: usize) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                l, classes
            )));
        }
        out.data_mut()[i * classes + l] = T::one();
    }
    Ok(out)
}
