//! Joint reconstruction of super-resolved fluorescence and quantitative
//! phase from a stack of low-resolution images of a sample illuminated by
//! a laterally translating, unknown speckle pattern.
//!
//! The library is organized around:
//! - [`types`]: grids, images, speckle patterns, transfer functions and
//!   scan trajectories shared by every stage,
//! - [`fft`] and [`ops`]: the FFT contract, crop/pad adjoint pair,
//!   Fourier sub-pixel shifts, transfer-function synthesis and sub-pixel
//!   registration,
//! - [`forward`] and [`grad`]: the incoherent and coherent forward models,
//!   their costs, and hand-derived analytic gradients,
//! - [`solver`]: the two sequential gradient-descent reconstructions with
//!   per-variable normalized steps, Nesterov acceleration and trajectory
//!   refinement,
//! - [`sim`]: synthetic speckle fields, phantoms and acquisition stacks,
//! - [`stitch`]: patch-wise reconstruction and feathered blending,
//! - [`oracle`]: dense explicit-matrix models used for verification.

pub mod error;
pub mod fdcheck;
pub mod fft;
pub mod forward;
pub mod grad;
pub mod ops;
pub mod oracle;
pub mod sim;
pub mod solver;
pub mod stitch;
pub mod types;

pub use error::{Error, Result};
