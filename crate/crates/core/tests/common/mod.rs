#![allow(dead_code, unused_imports)]

pub mod synth;
pub mod guarantees;

pub use fallsafe_core::qp::reference::{active_set_oracle, random_infeasible_qp, random_strictly_convex_qp};
