//! Monte Carlo validation of analytic energy profiles.
//!
//! Each replication walks every generated message down the chain with fresh
//! pseudo-random draws: at slice `j` the message slides with probability
//! `p_j` (one energy unit) or ejects (`d_j^2` units) and stops. Replication
//! `r` draws from an independent stream derived from `(seed, r)`, so serial
//! and parallel runs produce bit-identical results; aggregation walks the
//! replications in index order regardless of which thread produced them.
//!
//! The analytic model is fluid while walks need whole messages, so event
//! counts are rounded to the nearest integer up front and reported back;
//! compare analytic profiles computed from the same rounded counts.

use crate::model::{EnergyProfile, NetworkSpec, Strategy, Tolerance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("simulation needs at least one replication")]
    NoReplications,
    #[error(
        "event count g[{index}] = {value} is not an integer; \
         enable rounding to simulate a fluid spec"
    )]
    NonIntegerEvents { index: usize, value: f64 },
    #[error("strategy length {strategy} does not match network size {network}")]
    LengthMismatch { strategy: usize, network: usize },
    #[error(
        "model mismatch at slice {slice}: discrepancy {delta} \
         with zero standard error"
    )]
    ModelMismatch { slice: usize, delta: f64 },
}

/// Monte Carlo run parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub replications: usize,
    pub seed: u64,
    /// Acceptance band half-width for z-scores in [`compare`].
    pub tolerance_sigmas: f64,
    /// Round fractional event counts instead of rejecting them.
    pub round_events: bool,
}

impl SimConfig {
    pub fn new(replications: usize, seed: u64) -> Self {
        SimConfig {
            replications,
            seed,
            tolerance_sigmas: 3.0,
            round_events: true,
        }
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::new(100_000, 0)
    }
}

/// Aggregated Monte Carlo estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    /// Integer event counts the walks actually used.
    pub rounded_events: Vec<u64>,
    pub mean_slid: Vec<f64>,
    pub mean_ejected: Vec<f64>,
    /// Empirical per-sensor energy means.
    pub mean_energy: Vec<f64>,
    /// Standard error of each per-sensor energy mean.
    pub energy_std_error: Vec<f64>,
    pub replications: usize,
}

/// One replication: walks every message and returns per-slice slide and
/// ejection counts. Message walks are independent; slice 0 always ejects.
fn walk_replication(
    counts: &[u64],
    probabilities: &[f64],
    rng: &mut ChaCha8Rng,
) -> (Vec<u64>, Vec<u64>) {
    let n = counts.len();
    let mut slid = vec![0u64; n];
    let mut ejected = vec![0u64; n];
    for (origin, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut at = origin;
            loop {
                if rng.gen::<f64>() < probabilities[at] {
                    slid[at] += 1;
                    at -= 1; // p[0] = 0, so the walk never leaves the chain
                } else {
                    ejected[at] += 1;
                    break;
                }
            }
        }
    }
    (slid, ejected)
}

/// Runs the Monte Carlo walks and aggregates means and standard errors.
pub fn simulate(
    spec: &NetworkSpec,
    strategy: &Strategy,
    config: &SimConfig,
) -> Result<SimResult, SimError> {
    if config.replications == 0 {
        return Err(SimError::NoReplications);
    }
    if spec.len() != strategy.len() {
        return Err(SimError::LengthMismatch {
            strategy: strategy.len(),
            network: spec.len(),
        });
    }
    let n = spec.len();
    let mut counts = Vec::with_capacity(n);
    for (index, &value) in spec.events().iter().enumerate() {
        let rounded = value.round();
        if !config.round_events && (value - rounded).abs() > 1e-9 {
            return Err(SimError::NonIntegerEvents { index, value });
        }
        counts.push(rounded as u64);
    }

    let probabilities = strategy.probabilities().to_vec();
    let seed = config.seed;
    let replications: Vec<(Vec<u64>, Vec<u64>)> = (0..config.replications as u64)
        .into_par_iter()
        .map(|replication| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(replication);
            walk_replication(&counts, &probabilities, &mut rng)
        })
        .collect();

    // Sequential pass in replication order: sums of integer-valued terms
    // are exact, and the variance accumulation is schedule-independent.
    let reps = config.replications as f64;
    let mut sum_slid = vec![0.0; n];
    let mut sum_ejected = vec![0.0; n];
    let mut mean_energy = vec![0.0; n];
    let mut m2_energy = vec![0.0; n];
    for (r, (slid, ejected)) in replications.iter().enumerate() {
        for i in 0..n {
            sum_slid[i] += slid[i] as f64;
            sum_ejected[i] += ejected[i] as f64;
            let energy =
                (slid[i] as f64 + ejected[i] as f64 * spec.ejection_cost(i)) / spec.battery(i);
            let delta = energy - mean_energy[i];
            mean_energy[i] += delta / (r as f64 + 1.0);
            m2_energy[i] += delta * (energy - mean_energy[i]);
        }
    }
    let energy_std_error = m2_energy
        .iter()
        .map(|&m2| {
            if config.replications > 1 {
                (m2 / (reps - 1.0) / reps).sqrt()
            } else {
                0.0
            }
        })
        .collect();

    Ok(SimResult {
        rounded_events: counts,
        mean_slid: sum_slid.iter().map(|&s| s / reps).collect(),
        mean_ejected: sum_ejected.iter().map(|&s| s / reps).collect(),
        mean_energy,
        energy_std_error,
        replications: config.replications,
    })
}

/// Per-slice agreement between an analytic profile and a Monte Carlo run.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub slice: usize,
    pub analytic: f64,
    pub empirical: f64,
    pub std_error: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub worst_slice: usize,
    pub worst_abs_z: f64,
    pub sigmas: f64,
    pub pass: bool,
}

/// Z-scores the empirical energies against an analytic profile (computed
/// from the same rounded event counts). A slice with zero standard error
/// must match exactly: any discrepancy there is a model mismatch, not a
/// statistical fluctuation.
pub fn compare(
    analytic: &EnergyProfile,
    sim: &SimResult,
    config: &SimConfig,
) -> Result<CompareReport, SimError> {
    if analytic.per_sensor().len() != sim.mean_energy.len() {
        return Err(SimError::LengthMismatch {
            strategy: analytic.per_sensor().len(),
            network: sim.mean_energy.len(),
        });
    }
    let exactness = Tolerance::default();
    let mut rows = Vec::with_capacity(sim.mean_energy.len());
    for i in 0..sim.mean_energy.len() {
        let expected = analytic.per_sensor()[i];
        let observed = sim.mean_energy[i];
        let std_error = sim.energy_std_error[i];
        let delta = observed - expected;
        let z = if std_error > 0.0 {
            delta / std_error
        } else if exactness.is_zero(delta, expected) {
            0.0
        } else {
            return Err(SimError::ModelMismatch { slice: i, delta });
        };
        rows.push(CompareRow {
            slice: i,
            analytic: expected,
            empirical: observed,
            std_error,
            z,
        });
    }
    let worst_slice = rows
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            a.z.abs()
                .partial_cmp(&b.z.abs())
                .expect("z-scores are finite")
        })
        .map(|(i, _)| i)
        .expect("report has at least one row");
    let worst_abs_z = rows[worst_slice].z.abs();
    let pass = worst_abs_z <= config.tolerance_sigmas;
    Ok(CompareReport {
        rows,
        worst_slice,
        worst_abs_z,
        sigmas: config.tolerance_sigmas,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{evaluate_strategy, Configuration};
    use approx::assert_relative_eq;

    fn spec(b: &[f64], d: &[f64], g: &[f64]) -> NetworkSpec {
        NetworkSpec::new(b.to_vec(), d.to_vec(), g.to_vec()).unwrap()
    }

    #[test]
    fn all_eject_walks_are_deterministic_and_exact() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[10.0, 1.0]);
        let strategy = Strategy::new(vec![0.0, 0.0]).unwrap();
        let result = simulate(&spec, &strategy, &SimConfig::new(50, 7)).unwrap();
        assert_eq!(result.mean_energy, vec![10.0, 4.0]);
        assert_eq!(result.energy_std_error, vec![0.0, 0.0]);

        let config = Configuration::new(spec, strategy).unwrap();
        let (_, profile) = evaluate_strategy(&config);
        let report = compare(&profile, &result, &SimConfig::new(50, 7)).unwrap();
        assert!(report.pass);
        assert_eq!(report.worst_abs_z, 0.0);
    }

    #[test]
    fn fixed_seed_reproduces_the_result_bit_for_bit() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let strategy = Strategy::new(vec![0.0, 0.975]).unwrap();
        let config = SimConfig::new(500, 12345);
        let a = simulate(&spec, &strategy, &config).unwrap();
        let b = simulate(&spec, &strategy, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replication_means_conserve_messages_exactly() {
        let spec = spec(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], &[2.0, 5.0, 7.0]);
        let strategy = Strategy::new(vec![0.0, 0.6, 0.3]).unwrap();
        let result = simulate(&spec, &strategy, &SimConfig::new(400, 3)).unwrap();
        for i in 0..spec.len() {
            let inbound = if i + 1 < spec.len() {
                result.mean_slid[i + 1]
            } else {
                0.0
            };
            // Integer-valued sums stay exact in double precision.
            assert_eq!(
                result.mean_slid[i] + result.mean_ejected[i],
                inbound + result.rounded_events[i] as f64
            );
        }
    }

    #[test]
    fn worked_instance_matches_analytic_profile_within_three_sigmas() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let strategy = Strategy::new(vec![0.0, 0.975]).unwrap();
        let sim_config = SimConfig::new(20_000, 0);
        let result = simulate(&spec, &strategy, &sim_config).unwrap();
        let config = Configuration::new(spec, strategy).unwrap();
        let (_, profile) = evaluate_strategy(&config);
        let report = compare(&profile, &result, &sim_config).unwrap();
        assert!(
            report.pass,
            "worst |z| = {} at slice {}",
            report.worst_abs_z, report.worst_slice
        );
    }

    #[test]
    fn perturbed_strategy_is_rejected() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let simulated = Strategy::new(vec![0.0, 0.875]).unwrap();
        let claimed = Strategy::new(vec![0.0, 0.975]).unwrap();
        let sim_config = SimConfig::new(10_000, 0);
        let result = simulate(&spec, &simulated, &sim_config).unwrap();
        let config = Configuration::new(spec, claimed).unwrap();
        let (_, profile) = evaluate_strategy(&config);
        let report = compare(&profile, &result, &sim_config).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn standard_errors_shrink_with_replication_count() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let strategy = Strategy::new(vec![0.0, 0.975]).unwrap();
        let small = simulate(&spec, &strategy, &SimConfig::new(400, 1)).unwrap();
        let large = simulate(&spec, &strategy, &SimConfig::new(6_400, 1)).unwrap();
        // Sixteen times the replications: standard errors shrink about 4x.
        let ratio = small.energy_std_error[1] / large.energy_std_error[1];
        assert!(
            (2.0..8.0).contains(&ratio),
            "expected roughly 4x shrink, got {ratio}"
        );
    }

    #[test]
    fn fractional_events_require_rounding_directive() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.5, 10.0]);
        let strategy = Strategy::new(vec![0.0, 0.5]).unwrap();
        let mut config = SimConfig::new(10, 0);
        config.round_events = false;
        assert_eq!(
            simulate(&spec, &strategy, &config),
            Err(SimError::NonIntegerEvents {
                index: 0,
                value: 1.5
            })
        );

        config.round_events = true;
        let result = simulate(&spec, &strategy, &config).unwrap();
        assert_eq!(result.rounded_events, vec![2, 10]);
    }

    #[test]
    fn zero_standard_error_with_discrepancy_is_a_model_mismatch() {
        let spec_simulated = spec(&[1.0], &[2.0], &[4.0]);
        let strategy = Strategy::new(vec![0.0]).unwrap();
        let sim_config = SimConfig::new(50, 0);
        let result = simulate(&spec_simulated, &strategy, &sim_config).unwrap();

        // Analytic profile of a different instance: deterministic walks
        // cannot explain the gap away as noise.
        let spec_claimed = spec(&[1.0], &[2.0], &[5.0]);
        let config = Configuration::new(spec_claimed, strategy).unwrap();
        let (_, profile) = evaluate_strategy(&config);
        assert!(matches!(
            compare(&profile, &result, &sim_config),
            Err(SimError::ModelMismatch { slice: 0, .. })
        ));
    }

    #[test]
    fn rejects_zero_replications_and_length_mismatch() {
        let network = spec(&[1.0], &[1.0], &[1.0]);
        let strategy = Strategy::new(vec![0.0]).unwrap();
        assert_eq!(
            simulate(&network, &strategy, &SimConfig::new(0, 0)),
            Err(SimError::NoReplications)
        );

        let wide = Strategy::new(vec![0.0, 0.5]).unwrap();
        assert!(matches!(
            simulate(&network, &wide, &SimConfig::new(10, 0)),
            Err(SimError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn mean_energy_converges_on_worked_instance() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let strategy = Strategy::new(vec![0.0, 0.975]).unwrap();
        let result = simulate(&spec, &strategy, &SimConfig::new(40_000, 9)).unwrap();
        assert_relative_eq!(result.mean_energy[0], 10.75, max_relative = 0.01);
        assert_relative_eq!(result.mean_energy[1], 10.75, max_relative = 0.01);
    }
}
