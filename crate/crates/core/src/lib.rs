//! Numerical laboratory for the noise geometry and linear stability of mini-batch SGD.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod harness;
pub mod kernels;
pub mod landscape;
pub mod models;
pub mod numerics;
pub mod oracles;
pub mod stability;
