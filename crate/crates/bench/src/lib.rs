//! Synthetic benchmark, training and inspection tools for `krst-core`.

pub mod dataset;
pub mod inspect;
pub mod run;
pub mod synth;
pub mod train;
