//! Shared fixtures for the benchmarks.

use fallsafe_core::config::Config;
use fallsafe_core::mpc::MpcConfig;
use nalgebra::DVector;

pub fn shipped_mpc() -> MpcConfig {
    Config::shipped().mpc_config().expect("shipped config is valid")
}

/// Cruise state at the start of the shipped corridor.
pub fn cruise_state() -> DVector<f64> {
    DVector::from_vec(vec![10.0, 0.0, 2.0, 0.0, 2.0, 0.0])
}
