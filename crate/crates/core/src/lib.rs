//! Latency-optimal power allocation for HARQ over time-correlated Rayleigh
//! fading.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod gcn;
pub mod graph;
pub mod matrix;
pub mod mc;
pub mod oracle;
pub mod trainer;

pub use analytics::{
    ChannelParams, LinkConfig, PerformanceReport, PowerPolicy, Scheme, OUTAGE_CLAMP, P_MIN,
};
pub use error::{Error, Result};
pub use matrix::Matrix;
