use crate::error::{CoreError, Result};

/// Dense row-major f32 tensor. The carrier for every learned value in the
/// pipeline (signals, latents, logits, parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        };
        t.debug_check_finite();
        Ok(t)
    }

    pub fn scalar(x: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-2d tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-2d tensor");
        self.shape[1]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> f32 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// NaN/Inf guard; active only in debug builds.
    pub fn debug_check_finite(&self) {
        debug_assert!(
            self.data.iter().all(|v| v.is_finite()),
            "tensor of shape {:?} contains non-finite values",
            self.shape
        );
    }
}
