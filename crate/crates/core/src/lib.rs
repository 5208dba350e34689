//! Learning to help a fixed legacy client.
//!
//! A client classifier `m` is trained once and frozen. A rejector `r` decides from
//! the raw input whether the client answers locally (`r > 0`) or the request is
//! sent to an edge expert `e` (`r <= 0`). Rejector and expert are trained jointly
//! under a calibrated exponential surrogate of the generalized 0-1 loss.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are the double-precision instantiations used by the CLI and
//! the experiments.

// `!(x > 0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Dense linear algebra reads better with explicit indices.
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use data::{Dataset, GaussianMixtureTask, Label, LabeledSample};
pub use evaluation::{CurvePoint, EvalReport, Method, Prediction};
pub use losses::{CalibrationSpec, CostSpec};
pub use models::{Activation, Architecture, FixedClient, Scorer, SgdConfig, Tape};
pub use oracle::ConditionalPoint;
pub use training::HelpSystem;

pub type Dataset64 = Dataset<f64>;
pub type LabeledSample64 = LabeledSample<f64>;
pub type GaussianMixtureTask64 = GaussianMixtureTask<f64>;
pub type Scorer64 = Scorer<f64>;
pub type FixedClient64 = FixedClient<f64>;
pub type SgdConfig64 = SgdConfig<f64>;
pub type CostSpec64 = CostSpec<f64>;
pub type CalibrationSpec64 = CalibrationSpec<f64>;
pub type ConditionalPoint64 = ConditionalPoint<f64>;
pub type HelpSystem64 = HelpSystem<f64>;
pub type EvalReport64 = EvalReport<f64>;
pub type CurvePoint64 = CurvePoint<f64>;

pub type Dataset32 = Dataset<f32>;
pub type Scorer32 = Scorer<f32>;
pub type CostSpec32 = CostSpec<f32>;
