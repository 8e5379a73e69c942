//! Laboratory for undersampled cardiac MRI reconstruction.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense 4-D `f64` tensors with a reverse-mode graph.
//! * [`attention`]: feature recalibration modules, including the
//!   SimAM → L2-norm → Hadamard composite ([`attention::AttentionKind::CmrAtt`]).
//! * [`unet`]: the encoder/decoder backbone with attention insertion sites.
//! * [`kspace`]: FFTs, Cartesian masks, phantoms and dataset generation.
//! * [`metrics`]: MSE, PSNR and SSIM.
//! * [`trainer`]: AdamW training, evaluation and checkpoints.
//! * [`bench`]: multi-method benchmark tables and error-map export.
//! * [`config`]: the JSON experiment file read by the command line tool.

pub mod attention;
pub mod bench;
pub mod config;
pub mod error;
pub mod kspace;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Graph, Mode, Shape, Tensor, Var};
