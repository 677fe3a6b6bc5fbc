// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod imu;
pub mod cloud;
pub mod diagnostics;
pub mod eval;
pub mod io;
pub mod linear_init;
pub mod pipeline;
pub mod refine;
pub mod sim;
