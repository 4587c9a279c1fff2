#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod checkpoint;
pub mod distill;
pub mod downstream;
pub mod harness;
pub mod io;
pub mod models;
pub mod numerics;
pub mod synthdata;
