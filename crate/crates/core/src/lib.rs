//! Rectified-flow sampling lab built around momentum guidance.
//!
//! Samplers integrate `dz/dt = v(z, t, c)` from Gaussian noise at `t = 0` to
//! data at `t = 1` with Euler steps. Guidance is applied at the velocity
//! level: classifier-free guidance, autoguidance, and momentum guidance, which
//! extrapolates the current velocity away from an exponential moving average
//! of the velocities seen earlier on the same trajectory.
//!
//! Ground truth comes from Gaussian-mixture targets, whose optimal velocity
//! and score are available in closed form ([`gmm`]).

// `!(x > 0.0)` style guards reject NaN on purpose; index loops over small
// fixed dimensions read better than zipped iterators.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod csvfmt;
pub mod error;
pub mod exec;
pub mod flow;
pub mod gmm;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod mlp;
pub mod rng;
pub mod svg;

pub use error::{Error, Result};
pub use exec::ExecPolicy;
pub use flow::{Condition, TimeGrid, TrajectoryRecord, VelocityField};
pub use gmm::{GaussianMixture, SmoothedField};
pub use guidance::{sample_mg, GuidanceConfig};
pub use metrics::{MetricReport, SampleSet};
pub use mlp::{MlpParams, TrainConfig};
