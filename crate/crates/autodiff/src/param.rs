use crate::tensor::Tensor;

/// A named, optionally trainable tensor owned by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            grad: None,
            trainable: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
