//! Test-time optimization of expert pathways in mixture-of-experts networks.
//!
//! A *pathway* is the dense `tokens x layers x experts` routing-weight tensor
//! a router produces for one input. The optimizers in [`optimizers`] adjust a
//! masked slice of it at test time, either with the true label (oracle) or
//! from the labelled neighbors of the input in a [`refstore::ReferenceStore`].
//! [`plant`] builds small benchmarks with a known correct pathway and
//! [`harness`] runs and reports experiments over them.

pub mod error;
pub mod harness;
pub mod hex64;
pub mod kernels;
pub mod model;
pub mod neighborhood;
pub mod optimizers;
pub mod pathway;
pub mod plant;
pub mod refstore;
pub mod schedule;

pub use error::{Error, Result};
