//! Learning stabilizable control-affine dynamics from demonstrations with
//! control-contraction-metric (CCM) regularization, plus the planar quadrotor
//! testbed used to evaluate the learned models.
//!
//! Pipeline: [`demo`] manufactures `(x, u, xdot)` tuples from the true
//! [`plant`]; [`trainer`] fits random-feature dynamics ([`features`],
//! [`learned`]) by alternating convex sub-problems ([`conic`]) under the
//! contraction constraints of [`ccm`]; [`trajopt`] and [`tracking`] plan and
//! track on the learned models; [`harness`] runs the comparison benchmark.

pub mod error;
pub mod types;
pub mod system;
pub mod plant;
pub mod linalg;
pub mod features;
pub mod learned;
pub mod ccm;
pub mod conic;
pub mod demo;
pub mod trainer;
pub mod trajopt;
pub mod tracking;
pub mod harness;
pub mod io;

pub use error::{Error, Result};
pub use types::*;
