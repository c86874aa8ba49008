//! Restoration toolkit for defocus-degraded Earth-observation imagery.
//!
//! The crate covers the full desk-scale loop around an onboard deblurring
//! payload: synthesising realistic degradations, estimating the blur kernel
//! blindly from image pairs, inverting the blur with classical filters or a
//! small learned network, scoring the result without a reference, and running
//! everything through a tiled pipeline that respects hard memory budgets.
//!
//! Modules:
//!
//! * [`raster`] — planar float images, PPM/PGM/PNG I/O, tiling and stitching.
//! * [`degrade`] — blur kernels, convolution, spin blur, shot noise, and
//!   scripted degradation chains.
//! * [`spectral`] — FFT analysis, blind OTF estimation, kernel recovery, and
//!   parametric defocus fitting.
//! * [`deconv`] — Wiener and Richardson-Lucy deconvolution plus edge tapering.
//! * [`metrics`] — PSNR/SSIM, natural-scene statistics, NIQE, BRISQUE scoring,
//!   and Sobel edge maps.
//! * [`neural`] — a minimal NCHW tensor engine with hand-written backward
//!   passes, a three-scale restoration network, and its training loop.
//! * [`pipeline`] — memory-budgeted tiled restoration and the capture-chain
//!   entry point.
//! * [`synth`] — seeded synthetic scenes used by tests, benchmarks, and the
//!   toy training loop.

pub mod degrade;
pub mod deconv;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod raster;
pub mod spectral;
pub mod synth;

pub use degrade::{BlurKernel, DegradeSpec};
pub use error::{Error, Result};
pub use metrics::QualityReport;
pub use neural::{ModelWeights, Tensor4, TrainConfig};
pub use pipeline::{PipelineConfig, RestorationResult};
pub use raster::{RasterImage, SensorSpec, TileGrid};
pub use spectral::OtfEstimate;
