//! Symbolic music alignment: an offline aligner built on two warping passes and an online
//! follower driven by a per-slot value function.

pub mod dtw;
pub mod eval;
pub mod noteio;
pub mod offline;
pub mod online;
pub mod value_model;
