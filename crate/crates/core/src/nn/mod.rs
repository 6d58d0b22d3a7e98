//! A small layer stack with hand-written backward passes: dense and 2-D
//! convolution layers, ReLU, inverted dropout, Adam, and a finite-difference
//! gradient checker.

mod activation;
mod adam;
mod conv;
mod dense;
mod gradcheck;
mod tensor;

pub use activation::{dropout_apply, dropout_backward, relu_apply, relu_grad, DropoutMode};
pub use adam::{AdamConfig, AdamState};
pub use conv::Conv2d;
pub use dense::Dense;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use tensor::{Parameterized, Tensor};
