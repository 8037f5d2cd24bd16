// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod detector;
pub mod discretize;
pub mod error;
pub mod exec;
pub mod io;
pub mod linalg;
pub mod model;
pub mod policy;
pub mod reach;
pub mod scenario;
pub mod sim;
pub mod structure;
