// SPDX-License-Identifier: MIT OR Apache-2.0

//! Time-series out-of-distribution detection and generalization through
//! latent sub-domain discovery.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: windowing, normalization, ID/OOD partitioning and the on-disk
//!   dataset format.
//! - [`synthgen`]: seeded generator of non-stationary multichannel series with
//!   planted latent domains.
//! - [`nn`]: a small CPU neural-network core (convolution, pooling, batch
//!   norm, affine layers, gradient reversal, Adam).
//! - [`diversify`]: the iterative latent-domain training loop plus ERM and
//!   DANN baselines.
//! - [`detect`]: Mahalanobis, maximum-class-probability and ODIN scorers.
//! - [`eval`]: accuracy, AUROC, AUPR, H-divergence proxy and domain agreement.

#![deny(unsafe_code)]

pub mod data;
pub mod detect;
pub mod diversify;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod synthgen;
