//! Unsupervised discovery, modeling and localization of repeated rigid
//! objects from the keypoints of a single RGB-D frame.
//!
//! The pipeline matches keypoints by descriptor, builds triplets of matches
//! whose triangles agree geometrically, clusters the relative poses of those
//! triplets, chains the clusters into sparse landmark models and finally
//! looks for further instances of each model with RANSAC. Everything here is
//! pure computation over in-memory data; file formats and the command line
//! live in the `disco` crate.
//!
//! Units are millimeters and radians throughout.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod clustering;
pub mod detect;
mod error;
pub mod frame;
pub mod geom;
pub mod matching;
pub mod modelgraph;
pub mod pipeline;
pub mod synth;

mod math;
mod par;

pub use error::{Error, Result};
pub use geom::{Mat3, RigidTransform, Vec3};
pub use nalgebra;
