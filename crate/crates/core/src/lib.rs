//! Multidimensional diagonal state-space kernels (S4ND) and the pieces around
//! them: FFT convolution with analytic gradients, resolution change with
//! bandlimiting, a small trainable isotropic classifier, a synthetic scene
//! generator, and container I/O.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod fft;
pub mod io;
pub mod model;
pub mod ndkernel;
pub mod resolution;
pub mod ssm;
pub mod tensor;
pub mod util;

pub use conv::{ConvMode, FeatureMap};
pub use error::{Error, Result};
pub use ndkernel::{DenseKernelSpec, FactoredKernelSpec, KernelTensor};
pub use ssm::{Cutoff, DiagonalSSM, Discretization, InitKind};
pub use tensor::Tensor;
