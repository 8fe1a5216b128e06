#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod cli;
pub mod datagen;
pub mod geometry;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod oet;
pub mod train;
