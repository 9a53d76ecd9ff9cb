//! Contrastive representation learning for urban regions from hourly
//! inbound/outbound trip counts.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`ingest`] turns trip records into an `N x T x 2` count tensor
//!    (channel 0 = inbound, channel 1 = outbound) and z-scores it.
//! 2. [`augment`] produces two stochastic views of every region's series.
//! 3. [`encoder`] holds the three dilated-convolution encoders (inbound,
//!    outbound, joint) and their projection heads, with hand-written
//!    backward passes.
//! 4. [`objectives`] computes the per-timestep NT-Xent losses and the pooled
//!    alignment regularizer; [`trainer`] optimizes their sum.
//! 5. [`probe`] freezes the joint encoder and scores pooled embeddings with
//!    a ridge-regression probe.
//!
//! [`experiments`] scripts the augmentation grid, loss ablation, sensitivity
//! sweep and cross-city transfer runs. [`testkit`] carries the synthetic city
//! generator plus the brute-force oracles the test suites check against.

pub mod augment;
pub mod config;
pub mod container;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod ingest;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod testkit;
pub mod trainer;

pub use error::{Error, Result};
