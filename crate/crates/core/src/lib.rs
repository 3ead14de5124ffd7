//! From-scratch implementation of the OCTAMamba vessel-segmentation network:
//! a dense-tensor core with reverse-mode autodiff, the selective-scan state
//! space machinery (S6 recurrence, four-direction 2-D scanning), Haar wavelet
//! convolution, the attention modules (CAM/SAM/ECA/FFRM/attention gate), the
//! U-shaped network assembly, and a toy training/evaluation harness with
//! deterministic I/O.
//!
//! All numeric code is generic over [`Scalar`]: f32 is the runtime default,
//! f64 backs the gradient checks and oracle equivalence tests.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod net;
pub mod scalar;
pub mod scan;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, PgmError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Runtime-default tensor (training, inference, checkpoints).
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used by gradient checks and oracle tests.
pub type Tensor64 = Tensor<f64>;
