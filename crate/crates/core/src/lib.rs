//! Neural estimators of statistical divergences.
//!
//! The estimators maximize a variational objective over a constrained
//! shallow network class. Five kinds are supported: `kl`, `kl-dv`, `chi2`,
//! `h2` and `tv`. The crate also ships reference values
//! (closed form, quadrature, Monte Carlo plug-in) and a sweep harness for
//! measuring error decay.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distributions;
pub mod divergence;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod net;
pub mod oracle;
pub mod quadrature;
pub mod rng;
pub mod schedule;

pub use distributions::{parse_distribution, Distribution, SampleBatch};
pub use divergence::{h_derivative, h_value, optimal_potential, DivergenceKind, RatioValue};
pub use error::{Error, Result};
pub use estimator::{estimate, ClassChoice, EstimateResult, TrainOptions};
pub use net::{net_eval, Activation, Bounds, NetClassSpec, NetParams, OutputTransform};
pub use oracle::{compute_oracle, OracleChoice, OracleMethod, OracleResult};
pub use schedule::{class_schedule, resolve_schedule, Regime, ScheduleRequest, Support};
