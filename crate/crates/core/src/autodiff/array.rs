use super::{check_shape, Real};
use crate::error::{Error, Result};

/// Dense row-major array, optionally carrying a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> DiffArray<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(DiffArray { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        DiffArray { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        DiffArray { shape: shape.to_vec(), data: (0..n).map(&mut f).collect(), requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        DiffArray { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::shape(format!(
                    "gradient of length {} for array of shape {:?}",
                    g.len(),
                    self.shape
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    /// Element-type conversion; the gradient buffer is dropped.
    pub fn cast<U: Real>(&self) -> DiffArray<U> {
        DiffArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Read a single element by multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of extent {d}");
            flat = flat * d + ix;
        }
        self.data[flat]
    }
}
