//! Fallback-safe contingency MPC with an embedding-based anomaly monitor
//! and a slow reasoner that picks a recovery region.

pub mod config;
pub mod detector;
pub mod dynamics;
pub mod embedding;
pub mod mpc;
pub mod qp;
pub mod reasoner;
pub mod sim;

pub use config::{Config, ConfigError};
pub use detector::{Detector, DetectorError, EmbeddingCache, ScoreFn, ScoreKind};
pub use dynamics::{LinearDynamics, Polytope, RecoveryRegion};
pub use embedding::{CacheBudget, Observation};
pub use mpc::{MpcConfig, MpcError, PlanTree, Planner, RelaxedPlan, Trajectory};
pub use qp::{solve_qp, QpMethod, QpProblem, QpResult, QpStatus, SolverSettings};
pub use reasoner::{MockReasoner, ReasonerDecision, SlowReasoner};
pub use sim::{Method, Metrics, Outcome, Scenario, SimError, Simulator, Trace};
