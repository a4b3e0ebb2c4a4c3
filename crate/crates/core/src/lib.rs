// `!(x > 0.0)` style checks are deliberate: they reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bimamba;
pub mod checkpoint;
pub mod checks;
pub mod codecs;
pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ssm;
pub mod tensor;
pub mod trainer;
