//! Analytic strategy evaluation, structural optimality checks, and a
//! brute-force grid oracle for desk-scale instances.
//!
//! Evaluation propagates expected message counts from the outermost slice
//! toward the sink: `T_i = g_i + p_{i+1} T_{i+1}` messages reach slice `i`,
//! of which it slides `p_i T_i` and ejects the rest. The optimality check
//! inspects the shape of the per-sensor profile: the maximal slices must
//! form a plateau that ejects nothing past its sink-side edge and receives
//! everything at its far edge.

use crate::model::{
    EnergyProfile, FlowState, Lifespan, ModelError, NetworkSpec, Strategy, Tolerance,
};
use rayon::prelude::*;
use thiserror::Error;

/// Largest network the exhaustive oracle accepts.
pub const MAX_ORACLE_SLICES: usize = 5;

/// Practical ceiling on oracle grid size.
const MAX_ORACLE_POINTS: u128 = 10_000_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvaluatorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("configurations must share one network spec")]
    SpecMismatch,
    #[error(
        "exhaustive search infeasible: {slices} slices exceed the limit of {MAX_ORACLE_SLICES}"
    )]
    TooManySlices { slices: usize },
    #[error("oracle grid step must lie in (0, 1], got {step}")]
    InvalidStep { step: f64 },
    #[error("oracle grid of {points} points exceeds the practical limit of {MAX_ORACLE_POINTS}")]
    GridTooLarge { points: u128 },
}

/// A network spec paired with a strategy of matching length.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    spec: NetworkSpec,
    strategy: Strategy,
}

impl Configuration {
    pub fn new(spec: NetworkSpec, strategy: Strategy) -> Result<Self, EvaluatorError> {
        if spec.len() != strategy.len() {
            return Err(ModelError::ConfigurationMismatch {
                strategy: strategy.len(),
                network: spec.len(),
            }
            .into());
        }
        Ok(Configuration { spec, strategy })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }
}

/// Expected flows and energies under a strategy.
///
/// Messages reaching slice `i` are its own events plus whatever the slice
/// above slides down; `p_i` of them continue, the rest eject.
pub fn evaluate_strategy(config: &Configuration) -> (FlowState, EnergyProfile) {
    evaluate_parts(&config.spec, &config.strategy)
}

pub(crate) fn evaluate_parts(
    spec: &NetworkSpec,
    strategy: &Strategy,
) -> (FlowState, EnergyProfile) {
    assert_eq!(
        spec.len(),
        strategy.len(),
        "spec and strategy lengths must agree"
    );
    let n = spec.len();
    let mut reaching = vec![0.0; n];
    for i in (0..n).rev() {
        let from_above = if i + 1 < n {
            strategy.probability(i + 1) * reaching[i + 1]
        } else {
            0.0
        };
        reaching[i] = spec.events_at(i) + from_above;
    }
    let mut slid = Vec::with_capacity(n);
    let mut ejected = Vec::with_capacity(n);
    for (i, &total) in reaching.iter().enumerate() {
        let p = strategy.probability(i);
        slid.push(p * total);
        ejected.push((1.0 - p) * total);
    }
    let flow = FlowState::from_parts(slid, ejected, vec![0.0; n]);
    let profile = EnergyProfile::from_flow(&flow, spec);
    (flow, profile)
}

/// Outcome of one plateau-edge condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConditionCheck {
    /// The edge does not exist: nothing to require.
    Void,
    Holds {
        slice: usize,
        probability: f64,
    },
    Violated {
        slice: usize,
        probability: f64,
        required: f64,
    },
}

impl ConditionCheck {
    pub fn satisfied(&self) -> bool {
        !matches!(self, ConditionCheck::Violated { .. })
    }
}

/// Shape analysis of a per-sensor energy profile.
///
/// The maximum is attained on one or more contiguous runs of slices
/// (membership within tolerance). The peak cannot be lowered exactly when
/// every such run is pinned on both sides: nothing slides into the run
/// from outside (`p = 0` just above it, void when the run reaches the
/// outermost slice) and the run's sink-side slice already passes
/// everything down (`p = 1` there, void when the run touches the sink).
/// Any other move either raises a slice that is already at the maximum or
/// does not touch the peak at all.
///
/// `plateau_end` is the largest index attaining the maximum and
/// `first_below` the smallest index strictly below it; `left_condition`
/// and `right_condition` are the outward and sink-side checks for the run
/// containing `plateau_end`. `interior_ok` covers max-attaining runs
/// closer to the sink, which exist only in profiles with several separate
/// peaks (true when there are none).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityReport {
    pub profile: EnergyProfile,
    pub max_value: f64,
    pub plateau_end: usize,
    pub first_below: Option<usize>,
    pub left_condition: ConditionCheck,
    pub right_condition: ConditionCheck,
    pub interior_ok: bool,
    pub optimal: bool,
}

/// Checks the plateau ("tabletop") optimality conditions for a
/// configuration.
pub fn check_tabletop_optimality(config: &Configuration, tol: Tolerance) -> OptimalityReport {
    let (_, profile) = evaluate_strategy(config);
    let e = profile.per_sensor();
    let n = e.len();
    let p = config.strategy.probabilities();
    let max_value = profile.peak();
    let slack = tol.absolute_for(max_value);
    let prob_floor = tol.absolute_for(1.0);

    let at_max: Vec<bool> = e.iter().map(|&v| v >= max_value - slack).collect();
    let plateau_end = (0..n)
        .rev()
        .find(|&i| at_max[i])
        .expect("a nonempty profile attains its maximum");
    let mut plateau_start = plateau_end;
    while plateau_start > 0 && at_max[plateau_start - 1] {
        plateau_start -= 1;
    }
    let first_below = (0..n).find(|&i| !at_max[i]);

    let ejects_everything = |slice: usize| {
        if p[slice] <= prob_floor {
            ConditionCheck::Holds {
                slice,
                probability: p[slice],
            }
        } else {
            ConditionCheck::Violated {
                slice,
                probability: p[slice],
                required: 0.0,
            }
        }
    };
    let slides_everything = |slice: usize| {
        if p[slice] >= 1.0 - prob_floor {
            ConditionCheck::Holds {
                slice,
                probability: p[slice],
            }
        } else {
            ConditionCheck::Violated {
                slice,
                probability: p[slice],
                required: 1.0,
            }
        }
    };
    let outward_edge = |run_end: usize| {
        if run_end + 1 >= n {
            ConditionCheck::Void
        } else {
            ejects_everything(run_end + 1)
        }
    };
    let sink_side_edge = |run_start: usize| {
        if run_start == 0 {
            ConditionCheck::Void
        } else {
            slides_everything(run_start)
        }
    };

    let left_condition = outward_edge(plateau_end);
    let right_condition = sink_side_edge(plateau_start);

    // Further max-attaining runs below the plateau need the same pinning.
    let mut interior_ok = true;
    let mut i = 0;
    while i < plateau_start {
        if at_max[i] {
            let run_start = i;
            let mut run_end = i;
            while at_max[run_end + 1] {
                run_end += 1;
            }
            interior_ok &=
                outward_edge(run_end).satisfied() && sink_side_edge(run_start).satisfied();
            i = run_end + 1;
        } else {
            i += 1;
        }
    }

    let optimal = left_condition.satisfied() && right_condition.satisfied() && interior_ok;
    OptimalityReport {
        profile,
        max_value,
        plateau_end,
        first_below,
        left_condition,
        right_condition,
        interior_ok,
        optimal,
    }
}

/// Best grid point found by exhaustive search.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub strategy: Strategy,
    pub lifespan: Lifespan,
    /// Peak per-sensor energy at the best grid point (`1 / lifespan`).
    pub peak_energy: f64,
    pub points_evaluated: u64,
}

#[derive(Clone, Copy)]
struct Candidate {
    peak: f64,
    index: u64,
}

/// Lower peak wins; exact ties go to the lexicographically smallest
/// probability vector, which is the smallest linear index because the grid
/// digits are ordered most-significant-first. Total order, so the parallel
/// reduction is deterministic regardless of chunking.
fn better(a: Option<Candidate>, b: Option<Candidate>) -> Option<Candidate> {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some(x), Some(y)) => {
            if x.peak < y.peak || (x.peak == y.peak && x.index <= y.index) {
                Some(x)
            } else {
                Some(y)
            }
        }
    }
}

/// Exhaustively evaluates every strategy with probabilities on the grid
/// `{0, step, 2 step, ..., 1}` (slice 0 stays at zero) and returns the
/// lifespan maximizer.
pub fn brute_force_oracle(spec: &NetworkSpec, step: f64) -> Result<OracleOutcome, EvaluatorError> {
    if !(step.is_finite() && 0.0 < step && step <= 1.0) {
        return Err(EvaluatorError::InvalidStep { step });
    }
    let n = spec.len();
    if n > MAX_ORACLE_SLICES {
        return Err(EvaluatorError::TooManySlices { slices: n });
    }
    let mut grid = Vec::new();
    let mut tick = 0u32;
    loop {
        let value = f64::from(tick) * step;
        if value >= 1.0 {
            break;
        }
        grid.push(value);
        tick += 1;
    }
    grid.push(1.0);

    let glen = grid.len() as u64;
    let free_dims = (n - 1) as u32;
    let total_points = u128::from(glen).pow(free_dims);
    if total_points > MAX_ORACLE_POINTS {
        return Err(EvaluatorError::GridTooLarge {
            points: total_points,
        });
    }
    let total = total_points as u64;

    let batteries = spec.batteries().to_vec();
    let costs: Vec<f64> = (0..n).map(|i| spec.ejection_cost(i)).collect();
    let events = spec.events().to_vec();

    let peak_of = |index: u64| -> f64 {
        let mut stride = 1u64;
        let mut reaching_above = 0.0;
        let mut p_above = 0.0;
        let mut peak = 0.0f64;
        for i in (0..n).rev() {
            let p = if i == 0 {
                0.0
            } else {
                let value = grid[((index / stride) % glen) as usize];
                stride *= glen;
                value
            };
            let reaching = events[i] + p_above * reaching_above;
            let e = reaching * (p + (1.0 - p) * costs[i]) / batteries[i];
            if e > peak {
                peak = e;
            }
            reaching_above = reaching;
            p_above = p;
        }
        peak
    };

    let best = (0..total)
        .into_par_iter()
        .fold(
            || None,
            |acc, index| {
                better(
                    acc,
                    Some(Candidate {
                        peak: peak_of(index),
                        index,
                    }),
                )
            },
        )
        .reduce(|| None, better)
        .expect("grid contains at least one point");

    let mut probabilities = vec![0.0; n];
    let mut stride = 1u64;
    for i in (1..n).rev() {
        probabilities[i] = grid[((best.index / stride) % glen) as usize];
        stride *= glen;
    }
    let strategy = Strategy::new(probabilities).expect("grid points are valid probabilities");
    let lifespan = if best.peak > 0.0 {
        Lifespan::Finite(1.0 / best.peak)
    } else {
        Lifespan::Unbounded
    };
    Ok(OracleOutcome {
        strategy,
        lifespan,
        peak_energy: best.peak,
        points_evaluated: total,
    })
}

/// Upper bound on how far the best grid lifespan can sit below the
/// continuous optimum, from a per-coordinate Lipschitz bound on the peak
/// per-sensor energy: each probability moves any `e_i` by at most
/// `total_traffic * (1 + d_max^2) / b_min`, and the optimum lies within
/// `step / 2` of a grid point in every coordinate. Infinite when the grid
/// peak is too small for the bound to say anything.
pub fn oracle_lifespan_slack(spec: &NetworkSpec, step: f64, grid_peak_energy: f64) -> f64 {
    let n = spec.len();
    if n <= 1 {
        return 0.0; // no free coordinates: the grid holds the exact optimum
    }
    let total = spec.total_events();
    let d_max_sq = spec.ejection_cost(n - 1);
    let b_min = spec
        .batteries()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let gradient_bound = total * (1.0 + d_max_sq) / b_min;
    let peak_shift = (n - 1) as f64 * (step / 2.0) * gradient_bound;
    if grid_peak_energy > peak_shift {
        peak_shift / ((grid_peak_energy - peak_shift) * grid_peak_energy)
    } else {
        f64::INFINITY
    }
}

/// Finds an index where the first configuration spends at least as much per
/// sensor as the second. `None` would mean the second is strictly cheaper
/// everywhere, which the energy model rules out.
pub fn no_win_win_probe(
    c1: &Configuration,
    c2: &Configuration,
) -> Result<Option<usize>, EvaluatorError> {
    if c1.spec != c2.spec {
        return Err(EvaluatorError::SpecMismatch);
    }
    let (_, first) = evaluate_strategy(c1);
    let (_, second) = evaluate_strategy(c2);
    Ok((0..first.per_sensor().len()).find(|&i| first.per_sensor()[i] >= second.per_sensor()[i]))
}
