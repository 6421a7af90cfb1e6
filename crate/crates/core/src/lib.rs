//! Infinite-width transformer kernels evaluated by Monte-Carlo covariance
//! propagation, together with generators and exact oracles for a family of
//! combinatorial tasks and a harness that measures how many adaptation
//! samples a kernel predictor needs as the task size grows.
//!
//! The crate is organised bottom-up:
//!
//! * [`sampler`] draws joint attention-score matrices from their Gaussian
//!   infinite-width law in `O(T^3)` per draw.
//! * [`kernel`] propagates NNGP covariances and NTKs through attention,
//!   LayerNorm and MLP layers, plus the fully-connected baseline kernel.
//! * [`regression`] is kernel ridge regression and the two-stage residual
//!   adaptation predictor.
//! * [`finite_width`] is the finite transformer used as an empirical oracle,
//!   and its FLOP accounting.
//! * [`tasks`] generates task instances and recomputes their labels.
//! * [`harness`] runs capture sweeps and fits logarithmic budgets.
//!
//! Parallel Monte-Carlo loops use rayon behind the default `parallel`
//! feature. Every parallel loop is split into fixed batches with their own
//! random streams, so results do not depend on the worker count.

pub mod exec;
pub mod finite_width;
pub mod harness;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod regression;
pub mod rng;
pub mod sampler;
pub mod selftest;
pub mod tasks;

pub use exec::Exec;
pub use linalg::Matrix;

/// Version string recorded in dataset records and run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
