//! Panoramic spherical Gaussian pyramid engine.
//!
//! The crate implements the geometric and algorithmic core of a feed-forward
//! panoramic Gaussian-splatting pipeline: a Fibonacci-lattice spherical
//! Gaussian pyramid, a differentiable cubemap panorama renderer with an exact
//! adjoint, a hierarchical spherical plane-sweep cost volume, pre-padded tiled
//! execution of local operators, a two-step deferred backpropagation scheduler
//! with instrumented memory accounting, and distance-weighted deferred
//! blending plus panorama-aware image metrics.
//!
//! Everything is deterministic: identical inputs (and seeds) give bit-identical
//! outputs, which the test suite leans on heavily.

pub mod cost_volume;
pub mod cubemap;
pub mod deferred;
pub mod error;
pub mod formats;
pub mod gaussians;
pub mod geometry;
pub mod mem;
pub mod metrics;
pub mod raster;
pub mod render;
pub mod scene;
pub mod tiling;

pub use error::{Error, Result};
pub use geometry::{CameraPose, Direction, FibonacciLattice};
pub use raster::{ErpImage, Raster};
