//! Multi-scale 3D landmark localization.
//!
//! The crate is `no_std` and only needs `alloc`. It contains the numerical
//! heart of the system: volumes and their world geometry, a small
//! reverse-mode differentiable operator set, the localizer network block,
//! the coarse-to-fine cascade with its scheduled loss, procedural phantoms,
//! the Adam optimizer, and evaluation metrics. File formats, configuration
//! files and the command line live in the `lmcascade` crate.
#![cfg_attr(not(test), no_std)]
// Per-axis loops index several arrays at once, and negated comparisons are
// how NaN gets rejected.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod cascade;
pub mod diffgraph;
pub mod error;
pub mod eval;
pub mod locnet;
pub mod optim;
pub mod phantom;
pub mod real;
pub mod rng;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
pub use volume::{Geometry, Volume, WorldPoint};
