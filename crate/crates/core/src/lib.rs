//! Simulation and numerical verification of critical long-range percolation
//! on the hierarchical lattice, built on its description as a recursive
//! system of multiplicative coalescents.
//!
//! The crate is organised bottom-up:
//!
//! * [`lattice`]: ultrametric index arithmetic, kernels and the time schedule `t_n`.
//! * [`percsim`]: exact samplers for the configurations `η_n` (cluster forests,
//!   size multisets, lazy exploration of the origin cluster, two-point function).
//! * [`coalescent`]: the multiplicative coalescent (Gillespie paths, final-state
//!   shortcut, the recursive process `X_{n,t}`).
//! * [`momentode`]: moment ODE right-hand sides, closed forms and identities.
//! * [`oracle`]: exact laws on tiny instances.
//! * [`stats`]: estimators with mergeable standard errors.
//! * [`betac`]: critical-point bracketing by bisection on the scale flow.
//! * [`renorm`]: the renormalization map on empirical laws.
//!
//! Replica loops run through [`replicas`], which uses rayon when the
//! `parallel` feature is enabled (the default) and a plain sequential loop
//! otherwise. Results never depend on the worker count.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod betac;
pub mod coalescent;
pub mod error;
pub mod forest;
pub mod lattice;
pub mod mass;
pub mod momentode;
pub mod oracle;
pub mod percsim;
pub mod renorm;
pub mod replicas;
pub mod rng;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use lattice::{ModelParams, ScaleTime, VertexId};
pub use stats::MomentEstimate;
