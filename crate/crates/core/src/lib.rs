//! Lifespan-maximizing randomized data propagation for sliced sensor
//! networks.
//!
//! A network is a linear chain of slices indexed from `0` (adjacent to the
//! sink) to `n - 1` (farthest away). Every sensor in slice `i` can forward a
//! message one slice toward the sink for one energy unit ("slide") or send
//! it straight to the sink for `d_i^2` energy units ("eject"). The crate
//! computes, evaluates and stress-tests per-slice sliding probabilities that
//! maximize the time until the first slice exhausts its battery:
//!
//! * [`model`] - network description, message flows, ejection-probability
//!   chains and energy accounting.
//! * [`optimizer`] - the one-pass flow optimizer with catch-up recursion and
//!   clamped ejection chains.
//! * [`evaluator`] - analytic evaluation of arbitrary strategies, structural
//!   optimality checks, and a small brute-force grid oracle.
//! * [`simulator`] - seeded Monte Carlo validation of analytic profiles.

pub mod evaluator;
pub mod model;
pub mod optimizer;
pub mod simulator;

pub use evaluator::{
    brute_force_oracle, check_tabletop_optimality, evaluate_strategy, no_win_win_probe,
    oracle_lifespan_slack, ConditionCheck, Configuration, EvaluatorError, OptimalityReport,
    OracleOutcome,
};
pub use model::{
    epsilon_chain, epsilon_chain_with_caution, is_energy_balanced, per_sensor_energy, slice_energy,
    unit_slide_increments, EnergyProfile, EpsilonChain, EpsilonFlag, FlowState, Lifespan,
    ModelError, NetworkSpec, Strategy, Tolerance, DEFAULT_RELATIVE_TOLERANCE,
};
pub use optimizer::{
    compute_optimal, compute_optimal_with, strategy_from_flow, OptimizerError, OptimizerState,
    Solution,
};
pub use simulator::{compare, simulate, CompareReport, SimConfig, SimError, SimResult};
