//! Emulating the spread of a weather-style ensemble from a handful of
//! trajectories.
//!
//! The crate is organized bottom-up:
//!
//! * [`grids`]: grid geometry, ensemble mean/spread, standardization and
//!   channel packing.
//! * [`dataio`]: the ESG binary sample format, split manifests, norm-stat
//!   files and heatmap writers.
//! * [`synth`]: a coupled Lorenz-96 ensemble generator with the same tensor
//!   geometry as the real reanalysis windows.
//! * [`autodiff`]: dense tensors and a reverse-mode tape.
//! * [`layers`]: the convolution family (standard, full, affine, separable),
//!   pooling, batch normalization and a ConvLSTM cell.
//! * [`models`]: the 3D U-Net, the ConvLSTM temporal net, parameter stores,
//!   checkpoints and the linear regression baseline.
//! * [`train`]: losses, Adam, the data-parallel training loop and evaluation.

pub mod autodiff;
pub mod dataio;
pub mod error;
#[doc(hidden)]
pub mod fuzzing;
pub mod grids;
pub mod layers;
pub mod models;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
