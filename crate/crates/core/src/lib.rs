//! Layer-to-layer training on a simulated accelerator.
//!
//! The crate models a device with a byte-accurate memory ledger, a host-side
//! eager param-server holding the master weights, and three training
//! schedules (conventional, accumulated-gradient baseline and layer-to-layer
//! relay) that can be compared for memory, transfer volume and numerical
//! equivalence. An analytic cost model projects step times from bandwidth
//! and compute rates.

pub mod cost;
pub mod data;
pub mod eps;
pub mod error;
pub mod exec;
pub mod harness;
pub mod layers;
pub mod memory;
pub mod tensor;

pub use error::{Error, Result};
