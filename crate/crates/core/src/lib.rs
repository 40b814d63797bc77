//! Continuous-time 4D Gaussian occupancy engine.
//!
//! Scenes are described by structured space-time Gaussians that are sliced
//! at any timestamp into 3D Gaussians and splatted into semantic occupancy
//! grids. The crate also carries the synthetic scene generator used as
//! ground truth, a small differentiable-operator set for fitting and toy
//! training, and the evaluation metrics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod diffops;
pub mod dynamics;
pub mod error;
pub mod gradsuite;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod par;
pub mod optimize;
pub mod primitive;
pub mod refiner;
pub mod scenegen;
pub mod splat;

pub use error::{Error, Result};
pub use grid::{GridSpec, LabelGrid, SemanticOccupancyGrid};
pub use par::Execution;
pub use primitive::{Gaussian4D, JointGaussian4D, SlicedGaussian3D};
