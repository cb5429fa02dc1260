//! Network model: slice geometry, message flows, ejection-probability
//! chains and energy accounting.
//!
//! Slices are indexed from `0` (adjacent to the sink) to `n - 1`. Messages
//! travel toward the sink either by sliding one slice per hop (one energy
//! unit, paid by the sender) or by a direct ejection to the sink (`d_i^2`
//! energy units for slice `i`, where `d_i` is the slice's normalized
//! distance). Message counts are nonnegative reals: the model works with
//! expected flows, not individual packets.
//!
//! The central object is the ejection-probability chain `eps`: when one
//! extra message is handed to slice `i`, slice `k <= i` ejects the fraction
//! `eps_k` of what reaches it and slides the rest. The chain is chosen so
//! that the marginal per-sensor energy increase is identical across all
//! participating slices, which is what keeps a balanced network balanced.

use thiserror::Error;

/// Default relative tolerance shared by all balance and catch-up predicates.
pub const DEFAULT_RELATIVE_TOLERANCE: f64 = 1e-9;

/// Relative comparison tolerance.
///
/// The absolute slack granted to a comparison at scale `s` is
/// `relative * max(1, |s|)`, so quantities near zero are compared against an
/// absolute floor of `relative` itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    relative: f64,
}

impl Tolerance {
    pub fn new(relative: f64) -> Self {
        assert!(
            relative.is_finite() && relative > 0.0,
            "tolerance must be positive and finite, got {relative}"
        );
        Tolerance { relative }
    }

    pub fn relative(self) -> f64 {
        self.relative
    }

    /// Absolute slack for comparisons at the given scale.
    pub fn absolute_for(self, scale: f64) -> f64 {
        self.relative * scale.abs().max(1.0)
    }

    /// `a == b` up to relative slack.
    pub fn eq(self, a: f64, b: f64) -> bool {
        (a - b).abs() <= self.absolute_for(a.abs().max(b.abs()))
    }

    /// `a <= b` up to relative slack.
    pub fn le(self, a: f64, b: f64) -> bool {
        a <= b + self.absolute_for(a.abs().max(b.abs()))
    }

    /// `a >= b` up to relative slack.
    pub fn ge(self, a: f64, b: f64) -> bool {
        self.le(b, a)
    }

    /// `value == 0` up to the slack granted at `scale`.
    pub fn is_zero(self, value: f64, scale: f64) -> bool {
        value.abs() <= self.absolute_for(scale)
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::new(DEFAULT_RELATIVE_TOLERANCE)
    }
}

/// Validation and consistency errors for model inputs.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("network must contain at least one slice")]
    Empty,
    #[error(
        "battery, distance and event sequences must have equal lengths \
         (got {batteries}, {distances}, {events})"
    )]
    LengthMismatch {
        batteries: usize,
        distances: usize,
        events: usize,
    },
    #[error("battery capacity b[{index}] must be positive and finite, got {value}")]
    InvalidBattery { index: usize, value: f64 },
    #[error("distance d[0] must be at least 1, got {value}")]
    FirstDistanceBelowOne { value: f64 },
    #[error("distance d[{index}] must be finite, got {value}")]
    InvalidDistance { index: usize, value: f64 },
    #[error(
        "distances must be non-decreasing away from the sink: \
         d[{index}] = {value} is below d[{prev_index}] = {previous}"
    )]
    DistanceNotMonotone {
        index: usize,
        value: f64,
        prev_index: usize,
        previous: f64,
    },
    #[error("event count g[{index}] must be nonnegative and finite, got {value}")]
    InvalidEventCount { index: usize, value: f64 },
    #[error("sliding probability p[{index}] must lie in [0, 1], got {value}")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("slice 0 borders the sink and can only eject: p[0] must be 0, got {value}")]
    FirstSliceMustEject { value: f64 },
    #[error("strategy length {strategy} does not match network size {network}")]
    ConfigurationMismatch { strategy: usize, network: usize },
}

/// Immutable description of a sliced network: per-slice battery capacities,
/// normalized distances to the sink, and expected event (message) counts.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    batteries: Vec<f64>,
    distances: Vec<f64>,
    events: Vec<f64>,
}

impl NetworkSpec {
    /// Validates and builds a network description.
    ///
    /// Requirements: equal nonzero lengths, finite positive batteries,
    /// finite distances non-decreasing away from the sink with `d[0] >= 1`,
    /// and finite nonnegative event counts.
    pub fn new(
        batteries: Vec<f64>,
        distances: Vec<f64>,
        events: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if batteries.len() != distances.len() || batteries.len() != events.len() {
            return Err(ModelError::LengthMismatch {
                batteries: batteries.len(),
                distances: distances.len(),
                events: events.len(),
            });
        }
        if batteries.is_empty() {
            return Err(ModelError::Empty);
        }
        for (index, &value) in batteries.iter().enumerate() {
            if !value.is_finite() || value <= 0.0 {
                return Err(ModelError::InvalidBattery { index, value });
            }
        }
        for (index, &value) in distances.iter().enumerate() {
            if !value.is_finite() {
                return Err(ModelError::InvalidDistance { index, value });
            }
            if index == 0 {
                if value < 1.0 {
                    return Err(ModelError::FirstDistanceBelowOne { value });
                }
            } else if value < distances[index - 1] {
                return Err(ModelError::DistanceNotMonotone {
                    index,
                    value,
                    prev_index: index - 1,
                    previous: distances[index - 1],
                });
            }
        }
        for (index, &value) in events.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(ModelError::InvalidEventCount { index, value });
            }
        }
        Ok(NetworkSpec {
            batteries,
            distances,
            events,
        })
    }

    pub fn len(&self) -> usize {
        self.batteries.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty networks
    }

    pub fn batteries(&self) -> &[f64] {
        &self.batteries
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn events(&self) -> &[f64] {
        &self.events
    }

    pub fn battery(&self, i: usize) -> f64 {
        self.batteries[i]
    }

    pub fn distance(&self, i: usize) -> f64 {
        self.distances[i]
    }

    pub fn events_at(&self, i: usize) -> f64 {
        self.events[i]
    }

    /// Cost of one ejection from slice `i`.
    pub fn ejection_cost(&self, i: usize) -> f64 {
        self.distances[i] * self.distances[i]
    }

    pub fn total_events(&self) -> f64 {
        self.events.iter().sum()
    }
}

/// Running account of where messages are: `slid[i]` and `ejected[i]` count
/// messages slice `i` has forwarded to slice `i - 1` (or the sink, for
/// `i = 0`) and ejected directly, while `pending[i]` counts messages sitting
/// at slice `i` awaiting treatment.
///
/// Conservation: once nothing is pending, `slid[i] + ejected[i]` equals the
/// generated events of slice `i` plus `slid[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub(crate) slid: Vec<f64>,
    pub(crate) ejected: Vec<f64>,
    pub(crate) pending: Vec<f64>,
}

impl FlowState {
    /// Starting state: nothing treated, every generated message pending.
    pub fn initial(spec: &NetworkSpec) -> Self {
        let n = spec.len();
        FlowState {
            slid: vec![0.0; n],
            ejected: vec![0.0; n],
            pending: spec.events().to_vec(),
        }
    }

    /// Builds a state from explicit per-slice counts. Lengths must agree.
    pub fn from_parts(slid: Vec<f64>, ejected: Vec<f64>, pending: Vec<f64>) -> Self {
        assert!(
            slid.len() == ejected.len() && slid.len() == pending.len(),
            "flow component lengths must agree"
        );
        FlowState {
            slid,
            ejected,
            pending,
        }
    }

    pub fn len(&self) -> usize {
        self.slid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slid.is_empty()
    }

    pub fn slid(&self) -> &[f64] {
        &self.slid
    }

    pub fn ejected(&self) -> &[f64] {
        &self.ejected
    }

    pub fn pending(&self) -> &[f64] {
        &self.pending
    }

    /// Total messages slice `i` has treated so far.
    pub fn treated(&self, i: usize) -> f64 {
        self.slid[i] + self.ejected[i]
    }

    /// Signed violation of conservation at slice `i` for a fully treated
    /// state: `slid[i] + ejected[i] - slid[i + 1] - g[i]`.
    pub fn conservation_residual(&self, spec: &NetworkSpec, i: usize) -> f64 {
        let inbound = if i + 1 < self.len() {
            self.slid[i + 1]
        } else {
            0.0
        };
        self.slid[i] + self.ejected[i] - inbound - spec.events_at(i)
    }

    /// True when every component is nonnegative up to tolerance.
    pub fn is_physical(&self, tol: Tolerance) -> bool {
        let floor = -tol.absolute_for(1.0);
        self.slid
            .iter()
            .chain(self.ejected.iter())
            .chain(self.pending.iter())
            .all(|&v| v >= floor)
    }
}

/// Provenance of one ejection-probability entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsilonFlag {
    /// Solved from the marginal-balance recurrence.
    Free,
    /// Level start or below: ejects everything that reaches it.
    ForcedOne,
    /// Recurrence went nonpositive while the slice had ejected nothing;
    /// pinned to zero so it cannot "un-eject" messages it never sent.
    ClampedZero,
}

/// Per-slice marginal ejection probabilities with provenance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonChain {
    values: Vec<f64>,
    flags: Vec<EpsilonFlag>,
}

impl EpsilonChain {
    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn flag(&self, k: usize) -> EpsilonFlag {
        self.flags[k]
    }

    pub fn flags(&self) -> &[EpsilonFlag] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clamped_indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == EpsilonFlag::ClampedZero)
            .map(|(k, _)| k)
            .collect()
    }
}

struct Caution<'a> {
    flow: &'a FlowState,
    current: usize,
    tol: Tolerance,
}

/// Ejection-probability chain with slices `0..=first` forced to eject
/// everything and the rest solved from the marginal-balance recurrence.
pub fn epsilon_chain(spec: &NetworkSpec, first: usize) -> EpsilonChain {
    solve_epsilon_chain(spec, first, None)
}

/// Same chain, but entries whose recurrence value is nonpositive are pinned
/// to zero when the slice (at or below `current`) has ejected nothing yet.
/// Later entries are solved against the pinned value.
pub fn epsilon_chain_with_caution(
    spec: &NetworkSpec,
    first: usize,
    flow: &FlowState,
    current: usize,
    tol: Tolerance,
) -> EpsilonChain {
    solve_epsilon_chain(spec, first, Some(Caution { flow, current, tol }))
}

fn solve_epsilon_chain(spec: &NetworkSpec, first: usize, caution: Option<Caution>) -> EpsilonChain {
    let n = spec.len();
    assert!(first < n, "chain start {first} out of range for {n} slices");
    let mut values = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for _ in 0..=first {
        values.push(1.0);
        flags.push(EpsilonFlag::ForcedOne);
    }
    for k in first + 1..n {
        let spread = (spec.ejection_cost(k) - 1.0) / spec.battery(k);
        let prev = values[k - 1];
        let carried = (prev * (spec.ejection_cost(k - 1) - 1.0) + 1.0) / spec.battery(k - 1);
        let denom = spread + carried;
        assert!(
            denom > 0.0,
            "marginal-balance denominator must stay positive at slice {k}, got {denom}"
        );
        let mut value = (carried - 1.0 / spec.battery(k)) / denom;
        let mut flag = EpsilonFlag::Free;
        if let Some(caution) = &caution {
            if value <= 0.0
                && k <= caution.current
                && caution.tol.is_zero(caution.flow.ejected[k], 1.0)
            {
                value = 0.0;
                flag = EpsilonFlag::ClampedZero;
            }
        }
        values.push(value);
        flags.push(flag);
    }
    EpsilonChain { values, flags }
}

/// Total energy slice `i` has spent: one unit per slid message plus
/// `d_i^2` per ejected message.
pub fn slice_energy(flow: &FlowState, spec: &NetworkSpec, i: usize) -> f64 {
    flow.slid[i] + flow.ejected[i] * spec.ejection_cost(i)
}

/// Energy spent per sensor of slice `i`: `slice_energy / b_i`.
pub fn per_sensor_energy(flow: &FlowState, spec: &NetworkSpec, i: usize) -> f64 {
    slice_energy(flow, spec, i) / spec.battery(i)
}

/// Energy slice `i` spends to treat one message when it ejects the fraction
/// `epsilon` of it: `(1 - epsilon) + epsilon * d_i^2`.
pub fn unit_treatment_cost(spec: &NetworkSpec, epsilon: f64, i: usize) -> f64 {
    (1.0 - epsilon) + epsilon * spec.ejection_cost(i)
}

/// Per-sensor energy increases caused at slices `i, i - 1, ..., 0` by
/// handing one extra message to slice `i` under the chain `eps`.
///
/// When `eps` solves the marginal-balance recurrence all entries are equal,
/// which is exactly why sliding into a balanced prefix keeps it balanced.
pub fn unit_slide_increments(spec: &NetworkSpec, eps: &EpsilonChain, i: usize) -> Vec<f64> {
    let mut batch = 1.0;
    let mut increments = Vec::with_capacity(i + 1);
    for k in (0..=i).rev() {
        let epsilon = eps.value(k);
        increments.push(batch * unit_treatment_cost(spec, epsilon, k) / spec.battery(k));
        batch *= 1.0 - epsilon;
    }
    increments
}

/// Normalized residual of the marginal-balance recurrence at index `k`:
/// the per-sensor unit cost at `k` must equal the pass-through fraction
/// times the unit cost at `k - 1`. Zero (up to rounding) at every freely
/// solved index.
pub fn recurrence_residual(spec: &NetworkSpec, eps: &EpsilonChain, k: usize) -> f64 {
    assert!(k >= 1, "recurrence relates an index to its predecessor");
    let lhs = unit_treatment_cost(spec, eps.value(k), k) / spec.battery(k);
    let rhs = (1.0 - eps.value(k)) * unit_treatment_cost(spec, eps.value(k - 1), k - 1)
        / spec.battery(k - 1);
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0)
}

/// Network lifespan: time until the first slice empties its battery.
/// Unbounded when no slice spends any energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lifespan {
    Finite(f64),
    Unbounded,
}

impl Lifespan {
    pub fn as_f64(self) -> f64 {
        match self {
            Lifespan::Finite(v) => v,
            Lifespan::Unbounded => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Lifespan::Finite(_))
    }
}

impl std::fmt::Display for Lifespan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Lifespan::Finite(v) => write!(f, "{v}"),
            Lifespan::Unbounded => write!(f, "unbounded"),
        }
    }
}

/// Per-sensor energy expenditures together with the resulting lifespan
/// `1 / max_i e_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyProfile {
    per_sensor: Vec<f64>,
    lifespan: Lifespan,
}

impl EnergyProfile {
    pub fn from_flow(flow: &FlowState, spec: &NetworkSpec) -> Self {
        let per_sensor: Vec<f64> = (0..spec.len())
            .map(|i| per_sensor_energy(flow, spec, i))
            .collect();
        Self::from_per_sensor(per_sensor)
    }

    pub fn from_per_sensor(per_sensor: Vec<f64>) -> Self {
        assert!(!per_sensor.is_empty(), "profile needs at least one slice");
        let peak = per_sensor.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lifespan = if peak > 0.0 {
            Lifespan::Finite(1.0 / peak)
        } else {
            Lifespan::Unbounded
        };
        EnergyProfile {
            per_sensor,
            lifespan,
        }
    }

    pub fn per_sensor(&self) -> &[f64] {
        &self.per_sensor
    }

    pub fn len(&self) -> usize {
        self.per_sensor.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty profiles
    }

    pub fn lifespan(&self) -> Lifespan {
        self.lifespan
    }

    /// Largest per-sensor expenditure.
    pub fn peak(&self) -> f64 {
        self.per_sensor
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest per-sensor expenditure.
    pub fn floor(&self) -> f64 {
        self.per_sensor
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// True when all per-sensor expenditures agree up to tolerance at the scale
/// of the largest one.
pub fn is_energy_balanced(profile: &EnergyProfile, tol: Tolerance) -> bool {
    let peak = profile.peak();
    profile.floor() >= peak - tol.absolute_for(peak)
}

/// Per-slice sliding probabilities: slice `i` slides a treated message with
/// probability `p_i` and ejects it otherwise. Slice 0 always ejects.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    probabilities: Vec<f64>,
}

impl Strategy {
    pub fn new(probabilities: Vec<f64>) -> Result<Self, ModelError> {
        if probabilities.is_empty() {
            return Err(ModelError::Empty);
        }
        for (index, &value) in probabilities.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(ModelError::ProbabilityOutOfRange { index, value });
            }
        }
        if probabilities[0] != 0.0 {
            return Err(ModelError::FirstSliceMustEject {
                value: probabilities[0],
            });
        }
        Ok(Strategy { probabilities })
    }

    /// The all-eject strategy on `n` slices.
    pub fn all_eject(n: usize) -> Self {
        assert!(n > 0, "strategy needs at least one slice");
        Strategy {
            probabilities: vec![0.0; n],
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn probability(&self, i: usize) -> f64 {
        self.probabilities[i]
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty strategies
    }
}
