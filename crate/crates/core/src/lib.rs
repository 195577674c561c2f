//! Gradients of feed-forward networks assembled from Jacobian blocks.
//!
//! The backward pass ([`network::backprop`]) is checked against a dense
//! materialization of the full parameter Jacobian
//! ([`network::backprop_dense_reference`]) and against central finite
//! differences ([`gradcheck`]). [`convlower`] turns a single-channel
//! convolution into an equivalent dense layer, and [`train`] runs seeded SGD.

pub mod activations;
pub mod container;
pub mod convlower;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod network;
pub mod numkernel;
pub mod train;

pub use activations::ActivationKind;
pub use error::{Error, Result};
pub use layers::DenseLayer;
pub use losses::{HeadKind, Target};
pub use network::{GradResult, Network, NetworkShape, ParamLayout, ParamVector};
pub use numkernel::{DenseMatrix, DenseVector};
