// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod datagen;
pub mod executor;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod pruner;
pub mod quantizer;
pub mod tensor;
pub mod trainer;
pub mod zoo;
