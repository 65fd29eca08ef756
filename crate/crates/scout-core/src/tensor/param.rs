//! Named trainable parameter: a value matrix plus its gradient accumulator.

use super::Matrix;

/// A trainable tensor. `grad` always has the same shape as `value` and is
/// zeroed at the start of each optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    /// Whether decoupled weight decay applies. True for weight matrices,
    /// false for biases and normalisation affine parameters.
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix, decay: bool) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param {
            name: name.into(),
            value,
            grad,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.rows() * self.value.cols()
    }
}
