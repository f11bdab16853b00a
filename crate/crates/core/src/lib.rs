// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod eval;
pub mod fsutil;
pub mod model;
pub mod tensor;
pub mod train;
