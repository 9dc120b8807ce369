//! Reverse-mode automatic differentiation over dense rank-1..5 tensors,
//! limited to the layers needed by 2D-to-3D convolutional segmentation
//! networks: strided and transposed 3D convolutions, 2D convolutions, max
//! pooling, (block) dropout, and the losses of a conditional VAE.
//!
//! ```
//! use drrseg_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, -3.0]).unwrap());
//! let y = g.relu(x);
//! let s = g.sum_all(y);
//! let grads = g.backward(s).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
pub mod optim;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var, LOGVAR_CLAMP};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use rng::RngState;
pub use scalar::Scalar;
pub use tensor::Tensor;
