//! Dense numeric kernel: row-major matrices, the two-layer LeakyReLU
//! perceptron with hand-written backward pass, batch/structure cosines,
//! momentum SGD and a finite-difference gradient oracle.
//!
//! All arithmetic is `f64`.

mod cosine;
mod matrix;
mod mlp;
mod optim;

pub use cosine::{batch_cosine, structure_cosine, CosineMode, DEFAULT_EPS};
pub use matrix::Matrix;
pub use mlp::{
    leaky_relu, leaky_relu_grad, mlp2_backward, mlp2_forward, Mlp2Cache, Mlp2Grads, Mlp2Params,
    DEFAULT_SLOPE,
};
pub use optim::{finite_diff_grad, sgd_step};

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite value: {context}")]
    NonFinite { context: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;
