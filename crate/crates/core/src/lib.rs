//! Desk-scale open-vocabulary detection head.
//!
//! The crate holds every numerical piece of the detector and its synthetic
//! world: box geometry, the fixed text-embedding cosine classifier,
//! region-based distillation losses, pseudo-box image-level supervision,
//! the weight-transfer function, the staged head objectives, SGD, the
//! AP50 evaluator and the simulator that stands in for the frozen
//! vision-language teacher.
//!
//! It is `no_std` and only needs `alloc`. File formats, configuration and
//! the command-line front end live in the `ovdet` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod embedbank;
mod error;
pub mod evalkit;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod ils;
pub mod linalg;
pub mod math;
pub mod optim;
pub mod rkd;
pub mod seeding;
pub mod simworld;
pub mod train;
pub mod weight_transfer;

pub use error::{Error, Result};
pub use linalg::Matrix;
