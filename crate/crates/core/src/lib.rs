// NaN must fail these guards, so `!(x > 0.0)` is intended
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diffengine;
pub mod dynamics;
pub mod energy;
pub mod fpmode;
pub mod ident;
pub mod stability;
