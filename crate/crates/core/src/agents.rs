//! Controller decisions and the non-learning baselines.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math;
use crate::netmodel::{IntersectionId, LaneId, RoadNetwork};
use crate::sensing::{self, Subset};
use crate::simcore::{Controller, DecisionContext, Simulation, DT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerDecision {
    pub intersection: IntersectionId,
    pub phase: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    pub clock: u32,
    /// Requested green before the next decision; `None` means `min_green`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold: Option<u32>,
}

impl ControllerDecision {
    pub fn new(intersection: IntersectionId, phase: usize, clock: u32) -> Self {
        ControllerDecision { intersection, phase, probs: None, clock, hold: None }
    }

    pub fn with_probs(mut self, probs: Vec<f64>) -> Self {
        self.probs = Some(probs);
        self
    }

    pub fn with_hold(mut self, hold: u32) -> Self {
        self.hold = Some(hold);
        self
    }
}

/// Highest-scoring phase; ties keep `current`, otherwise the lowest index.
/// With `exclude_current`, `current` is never returned (unless it is the only
/// phase).
pub fn pick_phase(scores: &[f64], current: usize, exclude_current: bool) -> usize {
    if scores.len() <= 1 {
        return 0;
    }
    let mut best: Option<usize> = None;
    for (k, &v) in scores.iter().enumerate() {
        if exclude_current && k == current {
            continue;
        }
        match best {
            None => best = Some(k),
            Some(b) if v > scores[b] => best = Some(k),
            _ => {}
        }
    }
    let best = best.unwrap_or(0);
    if !exclude_current && current < scores.len() && scores[current] >= scores[best] {
        current
    } else {
        best
    }
}

// ---------------------------------------------------------------------------
// Fixed time
// ---------------------------------------------------------------------------

/// Cycles through the phases in order with fixed green times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedTime {
    pub greens: Vec<u32>,
}

impl FixedTime {
    pub fn new(greens: Vec<u32>) -> Self {
        FixedTime { greens }
    }

    /// Next phase and its green given the current phase, or the opening
    /// phase when the controller has not started.
    pub fn next(&self, current: usize, started: bool, phases: usize) -> (usize, u32) {
        let phase = if !started || phases == 0 { 0 } else { (current + 1) % phases };
        let green = self.greens.get(phase).copied().or_else(|| self.greens.last().copied()).unwrap_or(30);
        (phase, green)
    }
}

impl Controller for FixedTime {
    fn decide(&mut self, ctx: &DecisionContext<'_, '_>) -> Result<ControllerDecision> {
        let sig = ctx.signal();
        let phases = ctx.net().intersection(ctx.intersection).plan.len();
        let (phase, green) = self.next(sig.phase, sig.started, phases);
        Ok(ControllerDecision::new(ctx.intersection, phase, ctx.sim.clock).with_hold(green))
    }
}

// ---------------------------------------------------------------------------
// Max pressure
// ---------------------------------------------------------------------------

/// Greedy max-pressure at min-green spaced decision points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxPressure {
    /// Vehicles the controller can see (CVs at test time).
    pub visible: Subset,
}

impl Default for MaxPressure {
    fn default() -> Self {
        MaxPressure { visible: Subset::Cv }
    }
}

impl MaxPressure {
    pub fn new(visible: Subset) -> Self {
        MaxPressure { visible }
    }
}

/// Max-pressure choice from per-phase pressures.
pub fn max_pressure_choice(phase_pressures: &[f64], current: usize, forced: bool) -> usize {
    pick_phase(phase_pressures, current, forced)
}

impl Controller for MaxPressure {
    fn decide(&mut self, ctx: &DecisionContext<'_, '_>) -> Result<ControllerDecision> {
        let p = sensing::phase_pressures(ctx.net(), ctx.sim, ctx.intersection, self.visible);
        let phase = max_pressure_choice(&p, ctx.signal().phase, ctx.forced);
        Ok(ControllerDecision::new(ctx.intersection, phase, ctx.sim.clock))
    }
}

// ---------------------------------------------------------------------------
// Adaptive Webster
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WebsterParams {
    /// Veh/h/lane.
    pub saturation_flow: f64,
    pub update_interval: u32,
    pub min_cycle: f64,
    pub max_cycle: f64,
}

impl Default for WebsterParams {
    fn default() -> Self {
        WebsterParams { saturation_flow: 1800.0, update_interval: 300, min_cycle: 30.0, max_cycle: 120.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebsterPlanState {
    pub cycle: f64,
    /// Effective green per phase; sums to `cycle - lost_time`.
    pub splits: Vec<f64>,
    pub lost_time: f64,
}

impl WebsterPlanState {
    /// Equal splits of the minimum cycle.
    pub fn initial(phases: usize, lost_time: f64, params: &WebsterParams) -> Self {
        let cycle = params.min_cycle.max(lost_time + phases as f64);
        let g = (cycle - lost_time) / phases.max(1) as f64;
        WebsterPlanState { cycle, splits: vec![g; phases], lost_time }
    }
}

/// `C = (1.5 L + 5) / (1 - Y)` clamped to the cycle bounds, splits in
/// proportion to the critical flow ratios `y`. `Y >= 1` gives the maximum
/// cycle; `Y = 0` splits equally.
pub fn webster_plan(y: &[f64], lost_time: f64, params: &WebsterParams) -> WebsterPlanState {
    let total: f64 = y.iter().sum();
    let cycle = if total >= 1.0 {
        params.max_cycle
    } else {
        ((1.5 * lost_time + 5.0) / (1.0 - total)).clamp(params.min_cycle, params.max_cycle)
    };
    let cycle = cycle.max(lost_time + y.len() as f64);
    let green = cycle - lost_time;
    let splits = if total > 0.0 {
        let mut s: Vec<f64> = y.iter().map(|&yi| green * yi / total).collect();
        // Put the rounding residue on the largest split so the sum is exact.
        let residue = green - s.iter().sum::<f64>();
        let k = math::argmax(&s);
        s[k] += residue;
        s
    } else {
        vec![green / y.len().max(1) as f64; y.len()]
    };
    WebsterPlanState { cycle, splits, lost_time }
}

/// Re-plans from a window of per-lane arrival counts, or keeps `prev` when
/// the window saw no vehicles.
pub fn webster_update(
    prev: &WebsterPlanState,
    lane_counts: &[u32],
    phase_lanes: &[Vec<usize>],
    window_seconds: f64,
    params: &WebsterParams,
) -> WebsterPlanState {
    if lane_counts.iter().all(|&c| c == 0) || window_seconds <= 0.0 {
        return prev.clone();
    }
    let y: Vec<f64> = phase_lanes
        .iter()
        .map(|lanes| {
            lanes
                .iter()
                .map(|&k| lane_counts[k] as f64 * 3600.0 / window_seconds / params.saturation_flow)
                .fold(0.0, f64::max)
        })
        .collect();
    webster_plan(&y, prev.lost_time, params)
}

/// Webster timing re-planned periodically from CV arrival counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Webster {
    pub params: WebsterParams,
    pub plan: WebsterPlanState,
    incoming: Vec<LaneId>,
    /// For each phase, indices into `incoming` of the lanes it serves.
    phase_lanes: Vec<Vec<usize>>,
    counts: Vec<u32>,
    window_start: u32,
    min_green: u32,
    max_green: u32,
}

impl Webster {
    pub fn new(net: &RoadNetwork, node: IntersectionId, params: WebsterParams) -> Self {
        let n = net.intersection(node);
        let incoming = n.incoming.clone();
        let phase_lanes = (0..n.plan.len())
            .map(|p| {
                let pairs = net.phase_pairs(node, p);
                incoming
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| pairs.iter().any(|(from, _)| from == *l))
                    .map(|(k, _)| k)
                    .collect()
            })
            .collect();
        let t = n.plan.timing;
        let lost = (n.plan.len() as u32 * t.transition()) as f64;
        Webster {
            params,
            plan: WebsterPlanState::initial(n.plan.len(), lost, &params),
            counts: vec![0; incoming.len()],
            incoming,
            phase_lanes,
            window_start: 0,
            min_green: t.min_green,
            max_green: t.max_green,
        }
    }

    /// Integer green for a phase, kept within the green bounds.
    pub fn green(&self, phase: usize) -> u32 {
        let g = self.plan.splits.get(phase).copied().unwrap_or(0.0);
        let g = libm::round(g).max(0.0) as u32;
        g.clamp(self.min_green, self.max_green.max(self.min_green))
    }
}

impl Controller for Webster {
    fn decide(&mut self, ctx: &DecisionContext<'_, '_>) -> Result<ControllerDecision> {
        let sig = ctx.signal();
        let phases = self.plan.splits.len();
        let phase = if !sig.started || phases == 0 { 0 } else { (sig.phase + 1) % phases };
        Ok(ControllerDecision::new(ctx.intersection, phase, ctx.sim.clock).with_hold(self.green(phase)))
    }

    fn after_step(&mut self, sim: &Simulation<'_>, _node: IntersectionId) {
        for (k, &lane) in self.incoming.iter().enumerate() {
            self.counts[k] += sim
                .lane_vehicles(lane)
                .filter(|v| v.is_cv && entered_last_step(v.route_pos, v.lane_entry_time, sim.clock))
                .count() as u32;
        }
        let window = sim.clock - self.window_start;
        if window >= self.params.update_interval {
            self.plan = webster_update(&self.plan, &self.counts, &self.phase_lanes, window as f64, &self.params);
            self.counts.iter_mut().for_each(|c| *c = 0);
            self.window_start = sim.clock;
        }
    }
}

// Entry lanes are joined at the start of a step (t0 = clock - 1 afterwards);
// other lanes at the end of one (t0 = clock).
fn entered_last_step(route_pos: usize, t0: u32, clock: u32) -> bool {
    if route_pos == 0 {
        t0 + DT == clock
    } else {
        t0 == clock
    }
}
