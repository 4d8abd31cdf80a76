//! Continuous fitted value iteration (cFVI) for control-affine systems.
//!
//! Value iteration for continuous states and actions in continuous time:
//! the optimal action is available in closed form for control-affine
//! dynamics with a separable reward, so the Bellman target can be computed
//! without an inner optimization. The value function is represented by an
//! ensemble of locally quadratic networks that are negative definite by
//! construction, fitted to exponentially weighted n-step targets.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`dynamics`]: pendulum / cartpole / Furuta models, Euler integration,
//!   feature transforms, domain sampling.
//! - [`reward`]: quadratic state reward, log-cosine action barrier and its
//!   convex conjugate.
//! - [`valuefn`]: the locally quadratic value ensemble, exact gradients and
//!   the minibatch fitting loop.
//! - [`hjb`]: closed-form policy and n-step value targets.
//! - [`training`]: DP and RTDP outer loops, replay buffer, checkpoints.
//! - [`oracle`]: tabular grid value iteration and contraction checks used
//!   for verification.
//! - [`evaluation`]: rollout protocol, success criterion, trace export.

pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod hjb;
pub mod oracle;
pub mod reward;
pub mod rng;
pub mod training;
pub mod valuefn;

pub use error::{Error, Result};

/// Row-chunk size for batch-parallel kernels. Fixed so that results do not
/// depend on the number of worker threads.
pub(crate) const CHUNK_ROWS: usize = 1024;
