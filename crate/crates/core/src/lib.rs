//! Network-aware value stacking of community batteries.
//!
//! Communities with co-located batteries, PV and HVAC load sit on a radial
//! feeder. They trade power with the grid and with each other under a
//! linearized power-flow model. The crate provides the model, an embedded QP
//! backend, a centralized benchmark and synchronous or asynchronous ADMM.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod centralized;
pub mod devices;
pub mod metrics;
pub mod network;
pub mod qp;
pub mod scenario;
pub mod subproblems;
