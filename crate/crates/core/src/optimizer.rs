//! One-pass flow optimizer.
//!
//! Slices are treated in order, nearest the sink first. When slice `i` comes
//! up, it first ejects just enough messages to match the per-sensor
//! expenditure of the already-balanced slices below (`ideal_ejection`), then
//! slides the rest down. Each slid message is split across the slices it
//! passes by the current ejection-probability chain, which keeps the
//! marginal per-sensor cost identical everywhere below, so balance is
//! preserved without revisiting earlier slices.
//!
//! Two complications break the plain sweep:
//!
//! * Too few messages: slice `i` cannot even match the expenditure below.
//!   It ejects everything it has and the optimizer descends one recursion
//!   level: balancing restarts at `i` with the smaller expenditure as the
//!   new target, while the level above remembers the old ceiling. If a
//!   later, busier slice can push enough traffic down to lift the inner
//!   group back to the remembered ceiling (`msg_to_go_up` messages), the
//!   optimizer ascends again and continues under the outer chain.
//!
//! * Negative chain entries: a slice with a weak battery relative to its
//!   neighbors may be asked to "un-eject" messages (negative epsilon) to
//!   stay balanced. That is only possible while it still has ejections to
//!   reclaim. `slide_careful` slides up to that budget (`compute_max_slide`),
//!   then re-solves the chain with the exhausted slice pinned to zero and
//!   continues. The pinned slice stops participating and its per-sensor
//!   expenditure rises above its neighbors: a deliberate local peak.
//!
//! Recursion levels are explicit frames on a stack; there is no call-stack
//! recursion anywhere.

use crate::model::{
    epsilon_chain, epsilon_chain_with_caution, per_sensor_energy, unit_treatment_cost,
    EnergyProfile, EpsilonChain, EpsilonFlag, FlowState, ModelError, NetworkSpec, Strategy,
    Tolerance,
};
use thiserror::Error;

/// Optimizer failures.
///
/// `Internal` means a progress or physicality assertion fired: the inputs
/// were valid but the computation reached a state it never should.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Spec(#[from] ModelError),
    #[error("untreated messages remain at slice {slice}: {pending}")]
    UntreatedMessages { slice: usize, pending: f64 },
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

/// Event log entry for debugging optimizer runs.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    SliceStarted { slice: usize },
    Ejected { slice: usize, amount: f64 },
    Slid { slice: usize, amount: f64 },
    Descended { start: usize, ceiling: f64 },
    Ascended { restored_start: usize },
    Clamped { slice: usize },
}

/// Chain entry pinned to zero during a careful slide, together with the
/// slice's ejection count at that moment (which must be zero: a slice can
/// only stop ejecting, never return messages it already sent).
#[derive(Debug, Clone, PartialEq)]
pub struct ClampEvent {
    pub slice: usize,
    pub ejected_at_clamp: f64,
}

/// Saved outer-level context while the optimizer balances an inner group.
#[derive(Debug, Clone)]
pub struct RecursionFrame {
    start: usize,
    energy_ceiling: f64,
    epsilons: EpsilonChain,
}

impl RecursionFrame {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn energy_ceiling(&self) -> f64 {
        self.energy_ceiling
    }

    pub fn epsilons(&self) -> &EpsilonChain {
        &self.epsilons
    }
}

/// What to slide next at the current slice, and whether the inner level has
/// caught up with the remembered ceiling afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlideDecision {
    pub amount: f64,
    pub ascend: bool,
}

/// Result of a full optimizer run.
#[derive(Debug, Clone)]
pub struct Solution {
    pub strategy: Strategy,
    pub flow: FlowState,
    pub profile: EnergyProfile,
    /// Chain in force when the sweep finished.
    pub epsilons: EpsilonChain,
    /// Starts of recursion levels that never caught up with their outer
    /// ceiling. These slices eject everything: their probability is zero.
    pub catch_up_starts: Vec<usize>,
    /// Number of recursion levels opened during the run.
    pub descents: usize,
    /// Chain entries pinned to zero, in the order they were pinned.
    pub clamp_events: Vec<ClampEvent>,
    /// Event log, present when the run was started with tracing enabled.
    pub trace: Option<Vec<TraceEvent>>,
}

/// Mutable sweep state. Public so the individual operations can be driven
/// and inspected directly; [`compute_optimal`] wraps the full run.
pub struct OptimizerState<'a> {
    spec: &'a NetworkSpec,
    tol: Tolerance,
    flow: FlowState,
    epsilons: EpsilonChain,
    stack: Vec<RecursionFrame>,
    current: usize,
    level_start: usize,
    energy_ceiling: f64,
    descents: usize,
    clamp_events: Vec<ClampEvent>,
    trace: Option<Vec<TraceEvent>>,
    message_scale: f64,
}

impl<'a> OptimizerState<'a> {
    pub fn new(spec: &'a NetworkSpec, tol: Tolerance) -> Self {
        OptimizerState {
            spec,
            tol,
            flow: FlowState::initial(spec),
            epsilons: epsilon_chain(spec, 0),
            stack: Vec::new(),
            current: 0,
            level_start: 0,
            energy_ceiling: f64::INFINITY,
            descents: 0,
            clamp_events: Vec::new(),
            trace: None,
            message_scale: spec.total_events(),
        }
    }

    /// Enables event recording; retrieve with [`OptimizerState::trace`].
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace(&self) -> Option<&[TraceEvent]> {
        self.trace.as_deref()
    }

    pub fn flow(&self) -> &FlowState {
        &self.flow
    }

    pub fn epsilons(&self) -> &EpsilonChain {
        &self.epsilons
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn level_start(&self) -> usize {
        self.level_start
    }

    pub fn energy_ceiling(&self) -> f64 {
        self.energy_ceiling
    }

    pub fn recursion_depth(&self) -> usize {
        self.stack.len()
    }

    fn record(&mut self, event: TraceEvent) {
        if let Some(trace) = &mut self.trace {
            trace.push(event);
        }
    }

    /// Messages below this are treated as a drained slice.
    fn pending_floor(&self) -> f64 {
        self.tol.absolute_for(self.message_scale)
    }

    /// Ejections that lift the current slice's per-sensor expenditure to
    /// exactly the level of the slice below.
    pub fn ideal_ejection(&self) -> f64 {
        assert!(self.current >= 1, "slice 0 has no predecessor to match");
        let below = per_sensor_energy(&self.flow, self.spec, self.current - 1);
        self.spec.battery(self.current) * below / self.spec.ejection_cost(self.current)
    }

    /// Ejects `amount` messages from the current slice's pending pool.
    pub fn eject(&mut self, amount: f64) -> Result<(), OptimizerError> {
        let floor = self.pending_floor();
        if amount < -floor {
            return Err(OptimizerError::Internal(format!(
                "negative ejection {amount} at slice {}",
                self.current
            )));
        }
        let amount = amount.max(0.0);
        let pending = self.flow.pending[self.current];
        if amount > pending + floor {
            return Err(OptimizerError::Internal(format!(
                "ejecting {amount} exceeds {pending} pending at slice {}",
                self.current
            )));
        }
        self.flow.ejected[self.current] += amount;
        let rest = pending - amount;
        self.flow.pending[self.current] = if rest <= floor { 0.0 } else { rest };
        self.record(TraceEvent::Ejected {
            slice: self.current,
            amount,
        });
        Ok(())
    }

    /// Slides `amount` messages down from the current slice, splitting the
    /// cascade by the chain in force. Does not watch for ejection budgets:
    /// negative chain entries may drive a slice's ejection count negative.
    pub fn slide_careless(&mut self, amount: f64) -> Result<(), OptimizerError> {
        let floor = self.pending_floor();
        if amount < -floor {
            return Err(OptimizerError::Internal(format!(
                "negative slide {amount} at slice {}",
                self.current
            )));
        }
        let amount = amount.max(0.0);
        let pending = self.flow.pending[self.current];
        if amount > pending + floor {
            return Err(OptimizerError::Internal(format!(
                "sliding {amount} exceeds {pending} pending at slice {}",
                self.current
            )));
        }
        let rest = pending - amount;
        self.flow.pending[self.current] = if rest <= floor { 0.0 } else { rest };
        let mut batch = amount;
        for k in (0..=self.current).rev() {
            let epsilon = self.epsilons.value(k);
            self.flow.slid[k] += batch * (1.0 - epsilon);
            self.flow.ejected[k] += batch * epsilon;
            batch *= 1.0 - epsilon;
            if batch == 0.0 {
                break;
            }
        }
        self.record(TraceEvent::Slid {
            slice: self.current,
            amount,
        });
        Ok(())
    }

    /// Largest batch that can slide from the current slice before some
    /// negative chain entry would drive a slice's ejection count below
    /// zero. `None` means unbounded (no negative entries in reach).
    pub fn compute_max_slide(&self) -> Option<f64> {
        let mut batch = 1.0;
        let mut budget: Option<f64> = None;
        for k in (0..=self.current).rev() {
            let epsilon = self.epsilons.value(k);
            let share = batch * epsilon;
            if share < 0.0 {
                let reclaimable = self.flow.ejected[k].max(0.0);
                let bound = reclaimable / -share;
                budget = Some(budget.map_or(bound, |b: f64| b.min(bound)));
            }
            batch *= 1.0 - epsilon;
        }
        budget
    }

    /// Slides `amount` messages, pinning exhausted chain entries to zero
    /// along the way. Every pass either moves messages or pins another
    /// entry, so the loop terminates.
    pub fn slide_careful(&mut self, amount: f64) -> Result<(), OptimizerError> {
        let floor = self.pending_floor();
        if amount < -floor {
            return Err(OptimizerError::Internal(format!(
                "negative careful slide {amount} at slice {}",
                self.current
            )));
        }
        let mut remaining = amount.max(0.0);
        if remaining == 0.0 {
            return Ok(());
        }
        loop {
            match self.compute_max_slide() {
                None => return self.slide_careless(remaining),
                Some(budget) if self.tol.le(remaining, budget) => {
                    return self.slide_careless(remaining)
                }
                Some(budget) => {
                    let slide_now = budget.max(0.0).min(remaining);
                    self.slide_careless(slide_now)?;
                    remaining -= slide_now;
                    let flags_before = self.epsilons.flags().to_vec();
                    self.epsilons = epsilon_chain_with_caution(
                        self.spec,
                        self.level_start,
                        &self.flow,
                        self.current,
                        self.tol,
                    );
                    let newly_pinned: Vec<usize> = self
                        .epsilons
                        .flags()
                        .iter()
                        .enumerate()
                        .filter(|&(k, &flag)| {
                            flag == EpsilonFlag::ClampedZero
                                && flags_before[k] != EpsilonFlag::ClampedZero
                        })
                        .map(|(k, _)| k)
                        .collect();
                    let pinned_any = !newly_pinned.is_empty();
                    for k in newly_pinned {
                        self.clamp_events.push(ClampEvent {
                            slice: k,
                            ejected_at_clamp: self.flow.ejected[k],
                        });
                        self.record(TraceEvent::Clamped { slice: k });
                    }
                    if !pinned_any && slide_now <= floor {
                        return Err(OptimizerError::Internal(format!(
                            "careful slide stalled at slice {}: nothing moved, nothing pinned",
                            self.current
                        )));
                    }
                    if remaining <= 0.0 {
                        return Ok(());
                    }
                }
            }
        }
    }

    /// Opens a recursion level at the current slice: the expenditure of the
    /// slice below becomes the ceiling to catch up with, and a fresh chain
    /// starts here.
    pub fn down_one_level(&mut self) {
        assert!(self.current >= 1, "slice 0 cannot open a recursion level");
        let ceiling = per_sensor_energy(&self.flow, self.spec, self.current - 1);
        self.stack.push(RecursionFrame {
            start: self.level_start,
            energy_ceiling: self.energy_ceiling,
            epsilons: self.epsilons.clone(),
        });
        self.level_start = self.current;
        self.energy_ceiling = ceiling;
        self.epsilons = epsilon_chain(self.spec, self.current);
        self.descents += 1;
        self.record(TraceEvent::Descended {
            start: self.current,
            ceiling,
        });
    }

    /// Messages the current slice must slide for its own per-sensor
    /// expenditure to reach the remembered ceiling. Infinite at the
    /// outermost level (no ceiling).
    pub fn msg_to_go_up(&self) -> f64 {
        if self.energy_ceiling.is_infinite() {
            return f64::INFINITY;
        }
        let i = self.current;
        let shortfall =
            (self.energy_ceiling - per_sensor_energy(&self.flow, self.spec, i)).max(0.0);
        let cost = unit_treatment_cost(self.spec, self.epsilons.value(i), i);
        assert!(
            cost > 0.0,
            "per-message treatment cost must stay positive at slice {i}, got {cost}"
        );
        self.spec.battery(i) * shortfall / cost
    }

    /// Closes the innermost recursion level, restoring the outer chain and
    /// ceiling exactly as saved.
    pub fn up_one_level(&mut self) -> Result<(), OptimizerError> {
        let frame = self.stack.pop().ok_or_else(|| {
            OptimizerError::Internal("cannot ascend from the outermost level".into())
        })?;
        self.level_start = frame.start;
        self.energy_ceiling = frame.energy_ceiling;
        self.epsilons = frame.epsilons;
        self.record(TraceEvent::Ascended {
            restored_start: self.level_start,
        });
        Ok(())
    }

    /// How much to slide next: everything at the outermost level, otherwise
    /// at most the catch-up amount, ascending when it is affordable.
    pub fn slide_amount_decision(&self) -> SlideDecision {
        let pending = self.flow.pending[self.current];
        if self.stack.is_empty() {
            return SlideDecision {
                amount: pending,
                ascend: false,
            };
        }
        let needed = self.msg_to_go_up();
        if self.tol.le(needed, pending) {
            SlideDecision {
                amount: needed.min(pending),
                ascend: true,
            }
        } else {
            SlideDecision {
                amount: pending,
                ascend: false,
            }
        }
    }

    /// Recursion starts that never caught up, outermost first.
    fn open_recursion_starts(&self) -> Vec<usize> {
        if self.stack.is_empty() {
            return Vec::new();
        }
        let mut starts: Vec<usize> = self.stack.iter().skip(1).map(|f| f.start).collect();
        starts.push(self.level_start);
        starts
    }

    /// Runs the sweep over all slices and extracts the strategy.
    pub fn run(mut self) -> Result<Solution, OptimizerError> {
        let n = self.spec.len();
        for slice in 0..n {
            self.current = slice;
            self.record(TraceEvent::SliceStarted { slice });
            if slice == 0 {
                // The sink neighbor has nowhere to slide.
                let all = self.flow.pending[0];
                self.eject(all)?;
                continue;
            }
            let ideal = self.ideal_ejection();
            let pending = self.flow.pending[slice];
            if !self.tol.le(ideal, pending) {
                self.eject(pending)?;
                self.down_one_level();
                continue;
            }
            self.eject(ideal.min(pending))?;
            loop {
                let pending_before = self.flow.pending[slice];
                if pending_before <= self.pending_floor() {
                    break;
                }
                let frames_before = self.stack.len();
                let clamps_before = self.clamp_events.len();
                let decision = self.slide_amount_decision();
                self.slide_careful(decision.amount)?;
                if decision.ascend {
                    self.up_one_level()?;
                }
                let progressed = self.flow.pending[slice] < pending_before
                    || self.stack.len() != frames_before
                    || self.clamp_events.len() != clamps_before;
                if !progressed {
                    return Err(OptimizerError::Internal(format!(
                        "no progress while treating slice {slice}: {pending_before} still pending"
                    )));
                }
            }
        }
        if !self.flow.is_physical(self.tol) {
            return Err(OptimizerError::Internal(
                "final flows violate nonnegativity".into(),
            ));
        }
        let strategy = strategy_from_flow(&self.flow, self.tol)?;
        let profile = EnergyProfile::from_flow(&self.flow, self.spec);
        let catch_up_starts = self.open_recursion_starts();
        Ok(Solution {
            strategy,
            flow: self.flow,
            profile,
            epsilons: self.epsilons,
            catch_up_starts,
            descents: self.descents,
            clamp_events: self.clamp_events,
            trace: self.trace,
        })
    }
}

/// Computes the lifespan-maximizing strategy with the default tolerance.
pub fn compute_optimal(spec: &NetworkSpec) -> Result<Solution, OptimizerError> {
    compute_optimal_with(spec, Tolerance::default())
}

/// Computes the lifespan-maximizing strategy with an explicit tolerance.
pub fn compute_optimal_with(
    spec: &NetworkSpec,
    tol: Tolerance,
) -> Result<Solution, OptimizerError> {
    OptimizerState::new(spec, tol).run()
}

/// Extracts per-slice sliding probabilities from a fully treated flow:
/// `p_i = slid_i / (slid_i + ejected_i)`, with idle slices pinned to zero.
pub fn strategy_from_flow(flow: &FlowState, tol: Tolerance) -> Result<Strategy, OptimizerError> {
    let total: f64 = (0..flow.len()).map(|i| flow.treated(i)).sum();
    let scale = total.max(1.0);
    let floor = tol.absolute_for(scale);
    let mut probabilities = Vec::with_capacity(flow.len());
    for i in 0..flow.len() {
        let pending = flow.pending()[i];
        if pending > floor {
            return Err(OptimizerError::UntreatedMessages { slice: i, pending });
        }
        let treated = flow.treated(i);
        let p = if treated <= floor {
            0.0
        } else {
            (flow.slid()[i] / treated).clamp(0.0, 1.0)
        };
        probabilities.push(p);
    }
    Strategy::new(probabilities)
        .map_err(|e| OptimizerError::Internal(format!("flow yields no valid strategy: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{epsilon_chain, is_energy_balanced};
    use approx::assert_relative_eq;

    fn spec(b: &[f64], d: &[f64], g: &[f64]) -> NetworkSpec {
        NetworkSpec::new(b.to_vec(), d.to_vec(), g.to_vec()).unwrap()
    }

    /// State positioned mid-sweep for exercising a single operation.
    fn state_at<'a>(
        spec: &'a NetworkSpec,
        flow: FlowState,
        epsilons: EpsilonChain,
        current: usize,
    ) -> OptimizerState<'a> {
        let mut state = OptimizerState::new(spec, Tolerance::default());
        state.flow = flow;
        state.epsilons = epsilons;
        state.current = current;
        state
    }

    fn little_battery_spec() -> NetworkSpec {
        spec(&[1.0, 0.1, 1.0], &[1.0, 2.0, 3.0], &[0.0, 0.0, 5.0])
    }

    #[test]
    fn ideal_ejection_matches_predecessor_expenditure() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let flow = FlowState::from_parts(vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 10.0]);
        let state = state_at(&spec, flow, epsilon_chain(&spec, 0), 1);
        assert_relative_eq!(state.ideal_ejection(), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn eject_moves_pending_to_ejected() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let mut state = state_at(&spec, FlowState::initial(&spec), epsilon_chain(&spec, 0), 1);
        state.eject(0.25).unwrap();
        assert_relative_eq!(state.flow().ejected()[1], 0.25, max_relative = 1e-12);
        assert_relative_eq!(state.flow().pending()[1], 9.75, max_relative = 1e-12);

        state.eject(0.0).unwrap();
        assert_relative_eq!(state.flow().pending()[1], 9.75, max_relative = 1e-12);

        let rest = state.flow().pending()[1];
        state.eject(rest).unwrap();
        assert_eq!(state.flow().pending()[1], 0.0);
    }

    #[test]
    fn eject_rejects_overdraw() {
        let spec = spec(&[1.0], &[1.0], &[1.0]);
        let mut state = state_at(&spec, FlowState::initial(&spec), epsilon_chain(&spec, 0), 0);
        assert!(matches!(state.eject(2.0), Err(OptimizerError::Internal(_))));
    }

    #[test]
    fn slide_careless_splits_by_chain() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let flow = FlowState::from_parts(vec![0.0, 0.0], vec![1.0, 0.25], vec![0.0, 9.75]);
        let mut state = state_at(&spec, flow, epsilon_chain(&spec, 0), 1);
        state.slide_careless(9.75).unwrap();
        assert_relative_eq!(state.flow().slid()[1], 9.75, max_relative = 1e-12);
        assert_relative_eq!(state.flow().ejected()[0], 10.75, max_relative = 1e-12);
        assert_eq!(state.flow().pending()[1], 0.0);
    }

    #[test]
    fn slide_careless_zero_amount_is_identity() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let flow = FlowState::from_parts(vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 10.0]);
        let before = flow.clone();
        let mut state = state_at(&spec, flow, epsilon_chain(&spec, 0), 1);
        state.slide_careless(0.0).unwrap();
        assert_eq!(state.flow(), &before);
    }

    #[test]
    fn slide_careless_stops_at_full_ejector() {
        // A chain entry of one absorbs the whole batch: nothing reaches
        // slices below the level start.
        let spec = spec(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], &[0.0, 0.0, 4.0]);
        let mut state = state_at(&spec, FlowState::initial(&spec), epsilon_chain(&spec, 1), 2);
        state.slide_careless(4.0).unwrap();
        let chain = epsilon_chain(&spec, 1);
        let kept = 1.0 - chain.value(2);
        assert_relative_eq!(state.flow().slid()[2], 4.0 * kept, max_relative = 1e-12);
        assert_relative_eq!(state.flow().ejected()[1], 4.0 * kept, max_relative = 1e-12);
        assert_eq!(state.flow().slid()[0], 0.0);
        assert_eq!(state.flow().ejected()[0], 0.0);
    }

    #[test]
    fn max_slide_unbounded_without_negative_entries() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let state = state_at(&spec, FlowState::initial(&spec), epsilon_chain(&spec, 0), 1);
        assert_eq!(state.compute_max_slide(), None);
    }

    #[test]
    fn max_slide_limited_by_reclaimable_ejections() {
        let spec = little_battery_spec();
        let flow = FlowState::from_parts(
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.9, 0.0],
            vec![0.0, 0.0, 5.0],
        );
        let state = state_at(&spec, flow, epsilon_chain(&spec, 0), 2);
        let budget = state.compute_max_slide().unwrap();
        assert_relative_eq!(budget, 3.2, max_relative = 1e-12);
    }

    #[test]
    fn max_slide_zero_when_nothing_to_reclaim() {
        let spec = little_battery_spec();
        let state = state_at(&spec, FlowState::initial(&spec), epsilon_chain(&spec, 0), 2);
        assert_eq!(state.compute_max_slide(), Some(0.0));
    }

    #[test]
    fn careful_slide_matches_careless_within_budget() {
        let spec = little_battery_spec();
        let flow = FlowState::from_parts(
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.9, 0.0],
            vec![0.0, 0.0, 5.0],
        );
        let mut careful = state_at(&spec, flow.clone(), epsilon_chain(&spec, 0), 2);
        let mut careless = state_at(&spec, flow, epsilon_chain(&spec, 0), 2);
        careful.slide_careful(2.0).unwrap();
        careless.slide_careless(2.0).unwrap();
        assert_eq!(careful.flow(), careless.flow());
        assert!(careful.clamp_events.is_empty());
    }

    #[test]
    fn careful_slide_pins_exhausted_entry_and_continues() {
        let spec = little_battery_spec();
        let flow = FlowState::from_parts(
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.9, 0.0],
            vec![0.0, 0.0, 5.0],
        );
        let mut state = state_at(&spec, flow, epsilon_chain(&spec, 0), 2);
        state.slide_careful(5.0).unwrap();

        assert_eq!(state.epsilons().flag(1), EpsilonFlag::ClampedZero);
        assert_eq!(state.clamp_events.len(), 1);
        assert_eq!(state.clamp_events[0].slice, 1);
        assert!(state.clamp_events[0].ejected_at_clamp.abs() <= 1e-9);

        let slid = state.flow().slid();
        let ejected = state.flow().ejected();
        assert_relative_eq!(slid[2], 4.0, max_relative = 1e-9);
        assert_relative_eq!(slid[1], 4.9, max_relative = 1e-9);
        assert_relative_eq!(ejected[2], 1.0, max_relative = 1e-9);
        assert!(ejected[1].abs() <= 1e-9);
        assert_relative_eq!(ejected[0], 4.9, max_relative = 1e-9);
        assert!(state.flow().is_physical(Tolerance::default()));

        // The pinned slice now outspends its sink-side neighbor: local peak.
        let e1 = per_sensor_energy(state.flow(), &spec, 1);
        let e0 = per_sensor_energy(state.flow(), &spec, 0);
        assert!(e1 > e0);
    }

    #[test]
    fn careful_slide_with_zero_budget_pins_before_moving() {
        let spec = little_battery_spec();
        let mut state = state_at(&spec, FlowState::initial(&spec), epsilon_chain(&spec, 0), 2);
        state.slide_careful(2.0).unwrap();
        assert_eq!(state.epsilons().flag(1), EpsilonFlag::ClampedZero);
        // Under the pinned chain half of each message ejects at slice 2.
        assert_relative_eq!(state.flow().slid()[2], 1.0, max_relative = 1e-9);
        assert_relative_eq!(state.flow().ejected()[2], 1.0, max_relative = 1e-9);
        assert_relative_eq!(state.flow().slid()[1], 1.0, max_relative = 1e-9);
        assert_eq!(state.flow().ejected()[1], 0.0);
    }

    #[test]
    fn descend_remembers_context_and_restarts_chain() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[10.0, 1.0]);
        let flow = FlowState::from_parts(vec![0.0, 0.0], vec![10.0, 1.0], vec![0.0, 0.0]);
        let mut state = state_at(&spec, flow, epsilon_chain(&spec, 0), 1);
        state.down_one_level();
        assert_eq!(state.recursion_depth(), 1);
        assert_eq!(state.level_start(), 1);
        assert_relative_eq!(state.energy_ceiling(), 10.0, max_relative = 1e-12);
        assert_eq!(state.epsilons().values(), &[1.0, 1.0]);
    }

    #[test]
    fn ascend_restores_saved_context_exactly() {
        let spec = little_battery_spec();
        let flow = FlowState::from_parts(
            vec![0.0, 0.0, 0.0],
            vec![2.0, 0.1, 0.0],
            vec![0.0, 0.0, 5.0],
        );
        let mut state = state_at(&spec, flow, epsilon_chain(&spec, 0), 1);
        let chain_before = state.epsilons().clone();
        let ceiling_before = state.energy_ceiling();
        let start_before = state.level_start();

        state.down_one_level();
        state.current = 2;
        state.up_one_level().unwrap();

        assert_eq!(state.epsilons(), &chain_before);
        assert_eq!(state.energy_ceiling(), ceiling_before);
        assert_eq!(state.level_start(), start_before);
        assert_eq!(state.recursion_depth(), 0);
    }

    #[test]
    fn ascend_from_outermost_level_is_an_error() {
        let spec = spec(&[1.0], &[1.0], &[1.0]);
        let mut state = state_at(&spec, FlowState::initial(&spec), epsilon_chain(&spec, 0), 0);
        assert!(matches!(
            state.up_one_level(),
            Err(OptimizerError::Internal(_))
        ));
    }

    #[test]
    fn msg_to_go_up_scales_shortfall_by_unit_cost() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[10.0, 20.0]);
        // Current slice spent 4 per sensor; ceiling is 10; chain entry 0
        // means every slid message costs one unit here.
        let flow = FlowState::from_parts(vec![0.0, 0.0], vec![10.0, 1.0], vec![0.0, 19.0]);
        let mut state = state_at(&spec, flow, epsilon_chain(&spec, 0), 1);
        state.energy_ceiling = 10.0;
        assert_relative_eq!(state.msg_to_go_up(), 6.0, max_relative = 1e-12);

        // Already at the ceiling: nothing to slide.
        state.energy_ceiling = 4.0;
        assert_eq!(state.msg_to_go_up(), 0.0);
    }

    #[test]
    fn msg_to_go_up_with_full_ejection_entry() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[10.0, 20.0]);
        let flow = FlowState::from_parts(vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 20.0]);
        let mut state = state_at(&spec, flow, epsilon_chain(&spec, 1), 1);
        state.energy_ceiling = 8.0;
        // Every message ejects at cost 4: two messages close the gap.
        assert_relative_eq!(state.msg_to_go_up(), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn decision_slides_everything_at_outermost_level() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let flow = FlowState::from_parts(vec![0.0, 0.0], vec![1.0, 0.25], vec![0.0, 9.75]);
        let state = state_at(&spec, flow, epsilon_chain(&spec, 0), 1);
        let decision = state.slide_amount_decision();
        assert_relative_eq!(decision.amount, 9.75, max_relative = 1e-12);
        assert!(!decision.ascend);
    }

    #[test]
    fn decision_caps_at_catch_up_amount_inside_recursion() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[10.0, 20.0]);
        let flow = FlowState::from_parts(vec![0.0, 0.0], vec![10.0, 1.0], vec![0.0, 10.0]);
        let mut state = state_at(&spec, flow, epsilon_chain(&spec, 0), 1);
        state.stack.push(RecursionFrame {
            start: 0,
            energy_ceiling: f64::INFINITY,
            epsilons: epsilon_chain(&spec, 0),
        });
        state.energy_ceiling = 10.0;
        let decision = state.slide_amount_decision();
        assert_relative_eq!(decision.amount, 6.0, max_relative = 1e-12);
        assert!(decision.ascend);
    }

    #[test]
    fn decision_keeps_sliding_when_catch_up_unaffordable() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[10.0, 20.0]);
        let flow = FlowState::from_parts(vec![0.0, 0.0], vec![10.0, 1.0], vec![0.0, 4.0]);
        let mut state = state_at(&spec, flow, epsilon_chain(&spec, 0), 1);
        state.stack.push(RecursionFrame {
            start: 0,
            energy_ceiling: f64::INFINITY,
            epsilons: epsilon_chain(&spec, 0),
        });
        state.energy_ceiling = 10.0;
        let decision = state.slide_amount_decision();
        assert_relative_eq!(decision.amount, 4.0, max_relative = 1e-12);
        assert!(!decision.ascend);
    }

    #[test]
    fn optimal_worked_instance_balances_both_slices() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 10.0]);
        let solution = compute_optimal(&spec).unwrap();
        let p = solution.strategy.probabilities();
        assert_eq!(p[0], 0.0);
        assert_relative_eq!(p[1], 0.975, max_relative = 1e-12);
        assert_relative_eq!(
            solution.profile.per_sensor()[0],
            10.75,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            solution.profile.per_sensor()[1],
            10.75,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            solution.profile.lifespan().as_f64(),
            1.0 / 10.75,
            max_relative = 1e-12
        );
        assert!(is_energy_balanced(&solution.profile, Tolerance::default()));
        assert!(solution.catch_up_starts.is_empty());
        assert_eq!(solution.descents, 0);
    }

    #[test]
    fn optimal_with_scarce_outer_traffic_ejects_everywhere() {
        let spec = spec(&[1.0, 1.0], &[1.0, 2.0], &[10.0, 1.0]);
        let solution = compute_optimal(&spec).unwrap();
        assert_eq!(solution.strategy.probabilities(), &[0.0, 0.0]);
        assert_relative_eq!(solution.profile.per_sensor()[0], 10.0, max_relative = 1e-12);
        assert_relative_eq!(solution.profile.per_sensor()[1], 4.0, max_relative = 1e-12);
        assert_eq!(solution.catch_up_starts, vec![1]);
        assert_eq!(solution.descents, 1);
    }

    #[test]
    fn optimal_single_slice_ejects_its_traffic() {
        let spec = spec(&[2.0], &[1.5], &[4.0]);
        let solution = compute_optimal(&spec).unwrap();
        assert_eq!(solution.strategy.probabilities(), &[0.0]);
        assert_relative_eq!(
            solution.profile.per_sensor()[0],
            4.0 * 2.25 / 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn optimal_run_is_deterministic() {
        let spec = spec(&[1.0, 0.1, 1.0], &[1.0, 2.0, 3.0], &[1.0, 0.0, 20.0]);
        let a = compute_optimal(&spec).unwrap();
        let b = compute_optimal(&spec).unwrap();
        assert_eq!(a.flow, b.flow);
        assert_eq!(a.strategy.probabilities(), b.strategy.probabilities());
    }

    #[test]
    fn strategy_from_flow_divides_slid_by_treated() {
        let flow = FlowState::from_parts(vec![0.0, 9.75], vec![10.75, 0.25], vec![0.0, 0.0]);
        let strategy = strategy_from_flow(&flow, Tolerance::default()).unwrap();
        assert_eq!(strategy.probability(0), 0.0);
        assert_relative_eq!(strategy.probability(1), 0.975, max_relative = 1e-12);
    }

    #[test]
    fn strategy_from_flow_pins_idle_slices_to_zero() {
        let flow = FlowState::from_parts(vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 0.0]);
        let strategy = strategy_from_flow(&flow, Tolerance::default()).unwrap();
        assert_eq!(strategy.probabilities(), &[0.0, 0.0]);
    }

    #[test]
    fn strategy_from_flow_rejects_untreated_messages() {
        let flow = FlowState::from_parts(vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]);
        assert!(matches!(
            strategy_from_flow(&flow, Tolerance::default()),
            Err(OptimizerError::UntreatedMessages { slice: 1, .. })
        ));
    }

    #[test]
    fn trace_records_descent_and_matching_ascent() {
        let spec = spec(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], &[10.0, 1.0, 20.0]);
        let solution = OptimizerState::new(&spec, Tolerance::default())
            .with_trace()
            .run()
            .unwrap();
        let trace = solution.trace.as_deref().unwrap();
        assert!(trace
            .iter()
            .any(|e| matches!(e, TraceEvent::Descended { start: 1, .. })));
        assert!(trace
            .iter()
            .any(|e| matches!(e, TraceEvent::Ascended { restored_start: 0 })));
        assert_eq!(solution.descents, 1);
        assert!(solution.catch_up_starts.is_empty());
    }
}
