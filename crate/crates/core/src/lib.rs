//! Estimation of multiplicative faults in linear DAE models, with optimal
//! periodic input design.

// `!(x > 0.0)` style guards are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod experiments;
pub mod filter_design;
pub mod input_design;
pub mod io;
pub mod linalg;
pub mod ltisim;
pub mod model;
pub mod pendulum;
pub mod polymat;

pub use error::{Error, Result};
