//! Dense row-major `f64` tensor.

/// Dense tensor. `grad` is populated by the optimizer path after a backward
/// pass; it always has the same length as `data` when present.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must match shape"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::from_vec(&[1], vec![x])
    }

    pub fn param(shape: &[usize], data: Vec<f64>) -> Self {
        let mut t = Tensor::from_vec(shape, data);
        t.requires_grad = true;
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Clears any accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
