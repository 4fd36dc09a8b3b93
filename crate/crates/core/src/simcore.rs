//! Deterministic discrete-time microsimulation.
//!
//! One call to [`Simulation::step`] advances the clock by [`DT`] seconds:
//!
//! 1. arrivals are drawn and inserted at entry lanes, then per-lane
//!    occupancy and delay at the current clock are logged,
//! 2. controllers at a decision point are queried,
//! 3. commands are applied to the signal controllers,
//! 4. vehicles move under a collision-free safe-speed car-following rule,
//! 5. signal timers run and the clock advances.
//!
//! Positions are the front bumper measured from the lane start; the stop line
//! sits at the lane length.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::ControllerDecision;
use crate::error::{Error, Result};
use crate::math;
use crate::netmodel::{
    DemandSpec, IntersectionId, LaneId, LaneKind, LinkId, RoadNetwork, Turn, MIN_GAP, VEHICLE_LENGTH,
};
use crate::rng::{self, Stream, StreamRng};

/// Simulation step (s).
pub const DT: u32 = 1;
/// Speeds below this count as waiting (m/s).
pub const WAITING_SPEED: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub vehicle_length: f64,
    pub min_gap: f64,
    /// Maximum acceleration (m/s^2).
    pub accel: f64,
    /// Comfortable / maximum deceleration (m/s^2).
    pub decel: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { vehicle_length: VEHICLE_LENGTH, min_gap: MIN_GAP, accel: 2.6, decel: 4.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: VehicleId,
    pub is_cv: bool,
    /// Lanes from the entry lane to the exit lane.
    pub route: Vec<LaneId>,
    /// Turn taken at the end of `route[k]`.
    pub turns: Vec<Turn>,
    pub route_pos: usize,
    pub position: f64,
    pub speed: f64,
    /// t0(v, l): when the vehicle entered its current lane.
    pub lane_entry_time: u32,
    pub spawn_time: u32,
    pub state: VehicleState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleState {
    /// Generated but waiting outside the network for space on its entry lane.
    Deferred,
    Active,
    Exited,
}

impl Vehicle {
    pub fn lane(&self) -> LaneId {
        self.route[self.route_pos]
    }

    pub fn next_lane(&self) -> Option<LaneId> {
        self.route.get(self.route_pos + 1).copied()
    }

    pub fn next_turn(&self) -> Option<Turn> {
        self.turns.get(self.route_pos).copied()
    }

    pub fn is_waiting(&self) -> bool {
        self.speed < WAITING_SPEED
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    Green,
    Yellow,
    AllRed,
}

/// Per-intersection signal controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalControllerState {
    pub intersection: IntersectionId,
    /// Current phase p; during yellow / all-red the phase being left.
    pub phase: usize,
    /// d: seconds the current green has been shown. Resets on phase change.
    pub elapsed: u32,
    pub mode: SignalMode,
    pub pending: Option<usize>,
    pending_hold: u32,
    /// Seconds left in the current mode (green: until the next decision).
    pub remaining: u32,
    /// False until the first decision of the round picks the opening phase.
    pub started: bool,
    /// Indication displayed during the step being simulated.
    pub shown: (usize, SignalMode),
    announced: bool,
}

impl SignalControllerState {
    pub fn new(intersection: IntersectionId) -> Self {
        SignalControllerState {
            intersection,
            phase: 0,
            elapsed: 0,
            mode: SignalMode::Green,
            pending: None,
            pending_hold: 0,
            remaining: 0,
            started: false,
            shown: (0, SignalMode::Green),
            announced: false,
        }
    }

    pub fn at_decision_point(&self) -> bool {
        self.mode == SignalMode::Green && self.remaining == 0
    }

    /// Seconds until the next decision point, assuming the pending green is
    /// held for its requested duration.
    pub fn time_to_decision(&self, all_red: u32) -> u32 {
        match self.mode {
            SignalMode::Green => self.remaining,
            SignalMode::Yellow => self.remaining + all_red + self.pending_hold,
            SignalMode::AllRed => self.remaining + self.pending_hold,
        }
    }
}

/// Command applied to a controller at a decision point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalCommand {
    pub phase: usize,
    /// Green seconds before the next decision; `None` means `min_green`.
    pub hold: Option<u32>,
}

impl SignalCommand {
    pub fn phase(phase: usize) -> Self {
        SignalCommand { phase, hold: None }
    }
}

// ---------------------------------------------------------------------------
// Event log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneWaiting {
    pub lane: LaneId,
    pub total: u32,
    pub cv: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Spawn {
        t: u32,
        vehicle: VehicleId,
        is_cv: bool,
        link: LinkId,
    },
    /// An arrival could not be inserted because its entry lane was full.
    Deferred {
        t: u32,
        vehicle: VehicleId,
    },
    LaneEnter {
        t: u32,
        vehicle: VehicleId,
        lane: LaneId,
        is_cv: bool,
    },
    LaneExit {
        t: u32,
        vehicle: VehicleId,
        lane: LaneId,
    },
    NetworkExit {
        t: u32,
        vehicle: VehicleId,
    },
    /// Occupancy of an intersection incoming lane at `t`, after that step's
    /// arrivals; only lanes holding at least one vehicle are logged.
    LaneSnapshot {
        t: u32,
        lane: LaneId,
        n: u32,
        n_cv: u32,
        delay_sum: f64,
    },
    Signal {
        t: u32,
        intersection: IntersectionId,
        phase: usize,
        mode: SignalMode,
    },
    Decision {
        t: u32,
        intersection: IntersectionId,
        phase: usize,
        previous_phase: usize,
        forced: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probs: Option<Vec<f64>>,
        waiting: Vec<LaneWaiting>,
    },
    RoundEnd {
        t: u32,
        spawned: u64,
        exited: u64,
        active: u64,
        deferred: u64,
        deferred_events: u64,
    },
}

impl Event {
    pub fn time(&self) -> u32 {
        match *self {
            Event::Spawn { t, .. }
            | Event::Deferred { t, .. }
            | Event::LaneEnter { t, .. }
            | Event::LaneExit { t, .. }
            | Event::NetworkExit { t, .. }
            | Event::LaneSnapshot { t, .. }
            | Event::Signal { t, .. }
            | Event::Decision { t, .. }
            | Event::RoundEnd { t, .. } => t,
        }
    }
}

/// Which record families are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogConfig {
    pub vehicles: bool,
    pub snapshots: bool,
    pub signals: bool,
    pub decisions: bool,
}

impl LogConfig {
    pub const ALL: LogConfig = LogConfig { vehicles: true, snapshots: true, signals: true, decisions: true };
    /// Enough for delay metrics.
    pub const METRICS: LogConfig = LogConfig { vehicles: false, snapshots: true, signals: false, decisions: false };
    pub const NONE: LogConfig = LogConfig { vehicles: false, snapshots: false, signals: false, decisions: false };
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig::ALL
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, e: Event) {
        debug_assert!(self.events.last().is_none_or(|p| p.time() <= e.time()));
        self.events.push(e);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Event> {
        self.events.iter()
    }
}

// ---------------------------------------------------------------------------
// Controllers
// ---------------------------------------------------------------------------

/// What a controller sees when asked for a decision.
pub struct DecisionContext<'s, 'n> {
    pub sim: &'s Simulation<'n>,
    pub intersection: IntersectionId,
    /// The current green reached max green: the decision must change phase.
    pub forced: bool,
}

impl<'s, 'n> DecisionContext<'s, 'n> {
    pub fn net(&self) -> &'n RoadNetwork {
        self.sim.net
    }

    pub fn signal(&self) -> &'s SignalControllerState {
        &self.sim.signals[self.intersection.0]
    }
}

/// Per-intersection decision callback.
pub trait Controller {
    fn decide(&mut self, ctx: &DecisionContext<'_, '_>) -> Result<ControllerDecision>;

    /// Called once after every simulation step.
    fn after_step(&mut self, _sim: &Simulation<'_>, _intersection: IntersectionId) {}
}

// ---------------------------------------------------------------------------
// Simulation state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub spawned: u64,
    pub exited: u64,
    pub deferred_events: u64,
}

/// SimState: the dynamic world.
#[derive(Debug, Clone)]
pub struct Simulation<'n> {
    pub net: &'n RoadNetwork,
    pub demand: &'n DemandSpec,
    pub cfg: SimConfig,
    pub clock: u32,
    /// Every vehicle generated this round, indexed by id.
    pub vehicles: Vec<Vehicle>,
    /// Vehicles on each lane, front (closest to the stop line) first.
    pub lanes: Vec<Vec<VehicleId>>,
    pub signals: Vec<SignalControllerState>,
    /// Arrivals waiting outside each entry (same order as `demand.entries`).
    pub waiting_entry: Vec<VecDeque<VehicleId>>,
    pub counters: Counters,
    pub log: EventLog,
    pub log_cfg: LogConfig,
    arrivals: StreamRng,
    cv_assign: StreamRng,
    turns: StreamRng,
    max_route_links: usize,
}

impl<'n> Simulation<'n> {
    pub fn new(net: &'n RoadNetwork, demand: &'n DemandSpec, seed: u64) -> Self {
        Simulation::with_config(net, demand, seed, SimConfig::default(), LogConfig::ALL)
    }

    pub fn with_config(
        net: &'n RoadNetwork,
        demand: &'n DemandSpec,
        seed: u64,
        cfg: SimConfig,
        log_cfg: LogConfig,
    ) -> Self {
        Simulation {
            net,
            demand,
            cfg,
            clock: 0,
            vehicles: Vec::new(),
            lanes: vec![Vec::new(); net.lanes.len()],
            signals: net.intersections.iter().map(|n| SignalControllerState::new(n.id)).collect(),
            waiting_entry: vec![VecDeque::new(); demand.entries.len()],
            counters: Counters::default(),
            log: EventLog::default(),
            log_cfg,
            arrivals: rng::stream(seed, Stream::Arrivals),
            cv_assign: rng::stream(seed, Stream::CvAssignment),
            turns: rng::stream(seed, Stream::Turns),
            max_route_links: 4 * (net.rows + net.cols) + 8,
        }
    }

    pub fn vehicle(&self, id: VehicleId) -> &Vehicle {
        &self.vehicles[id.0]
    }

    pub fn lane_vehicles(&self, lane: LaneId) -> impl Iterator<Item = &Vehicle> + '_ {
        self.lanes[lane.0].iter().map(move |&id| &self.vehicles[id.0])
    }

    pub fn active_count(&self) -> u64 {
        self.lanes.iter().map(|l| l.len() as u64).sum()
    }

    pub fn deferred_count(&self) -> u64 {
        self.waiting_entry.iter().map(|q| q.len() as u64).sum()
    }

    /// Intersections whose controller is green with no time left.
    pub fn decision_points(&self) -> Vec<IntersectionId> {
        self.signals.iter().filter(|s| s.at_decision_point()).map(|s| s.intersection).collect()
    }

    /// Whether a decision now must leave the current phase.
    pub fn forced_switch(&self, node: IntersectionId) -> bool {
        let s = &self.signals[node.0];
        let plan = &self.net.intersection(node).plan;
        s.started && plan.len() > 1 && s.elapsed >= plan.timing.max_green
    }

    /// Draws arrivals for the current clock and inserts waiting vehicles
    /// where their entry lane has room.
    pub fn spawn_arrivals(&mut self) {
        let t = self.clock;
        for (k, entry) in self.demand.entries.iter().enumerate() {
            let p = entry.schedule.rate_at(t) * DT as f64 / 3600.0;
            let u: f64 = self.arrivals.gen();
            let mut arrived = None;
            if u < p {
                let is_cv = self.cv_assign.gen::<f64>() < self.demand.cv_penetration;
                let id = VehicleId(self.vehicles.len());
                let (route, turns) = self.sample_route(entry.link);
                self.vehicles.push(Vehicle {
                    id,
                    is_cv,
                    route,
                    turns,
                    route_pos: 0,
                    position: 0.0,
                    speed: 0.0,
                    lane_entry_time: t,
                    spawn_time: t,
                    state: VehicleState::Deferred,
                });
                self.counters.spawned += 1;
                if self.log_cfg.vehicles {
                    self.log.push(Event::Spawn { t, vehicle: id, is_cv, link: entry.link });
                }
                self.waiting_entry[k].push_back(id);
                arrived = Some(id);
            }
            // Insert from the head of the queue while space allows.
            while let Some(&id) = self.waiting_entry[k].front() {
                let lane = self.vehicles[id.0].route[0];
                let gap = self.tail_gap(lane, 0.0);
                if gap < 0.0 {
                    break;
                }
                self.waiting_entry[k].pop_front();
                let limit = self.net.lane(lane).speed_limit;
                let leader_speed = self.lanes[lane.0].last().map_or(limit, |&v| self.vehicles[v.0].speed);
                let speed = limit.min(safe_speed(gap, leader_speed, self.cfg.decel));
                let v = &mut self.vehicles[id.0];
                v.state = VehicleState::Active;
                v.position = 0.0;
                v.speed = speed;
                v.lane_entry_time = t;
                let is_cv = v.is_cv;
                self.lanes[lane.0].push(id);
                if self.log_cfg.vehicles {
                    self.log.push(Event::LaneEnter { t, vehicle: id, lane, is_cv });
                }
            }
            if let Some(id) = arrived {
                if self.vehicles[id.0].state == VehicleState::Deferred {
                    self.counters.deferred_events += 1;
                    if self.log_cfg.vehicles {
                        self.log.push(Event::Deferred { t, vehicle: id });
                    }
                }
            }
        }
    }

    // Gap between a vehicle whose front would be at `front` on `lane` and the
    // current tail of that lane (negative when overlapping).
    fn tail_gap(&self, lane: LaneId, front: f64) -> f64 {
        match self.lanes[lane.0].last() {
            Some(&tail) => self.vehicles[tail.0].position - self.cfg.vehicle_length - self.cfg.min_gap - front,
            None => f64::INFINITY,
        }
    }

    fn sample_route(&mut self, entry: LinkId) -> (Vec<LaneId>, Vec<Turn>) {
        let net = self.net;
        let props = self.demand.turns;
        let mut links = vec![entry];
        let mut turns = Vec::new();
        let mut link = entry;
        while net.link(link).downstream.is_some() {
            let served = |t: Turn| net.link(link).lanes.iter().any(|&l| net.lane(l).serves(t));
            let options: Vec<(Turn, LinkId)> = Turn::ALL
                .iter()
                .filter(|&&t| served(t))
                .filter_map(|&t| net.turn_target(link, t).map(|l| (t, l)))
                .collect();
            let forced_through = links.len() >= self.max_route_links;
            let u: f64 = self.turns.gen();
            let (turn, next) = if forced_through {
                options.iter().copied().find(|(t, _)| *t == Turn::Through).unwrap_or(options[0])
            } else {
                let total: f64 = options.iter().map(|(t, _)| props.get(*t)).sum();
                let mut pick = options[options.len() - 1];
                if total > 0.0 {
                    let mut acc = 0.0;
                    for &(t, l) in &options {
                        acc += props.get(t) / total;
                        if u < acc {
                            pick = (t, l);
                            break;
                        }
                    }
                } else {
                    pick = options[0];
                }
                pick
            };
            turns.push(turn);
            links.push(next);
            link = next;
        }
        let mut lanes = Vec::with_capacity(links.len());
        for (k, &l) in links.iter().enumerate() {
            let next_turn = turns.get(k).copied();
            let prev_turn = if k > 0 { turns.get(k - 1).copied() } else { None };
            lanes.push(net.lane_for(l, next_turn, prev_turn));
        }
        (lanes, turns)
    }

    /// Applies commands (only valid at decision points) and advances every
    /// signal timer by one step. `commands[i]` belongs to intersection `i`.
    pub fn tick_signals(&mut self, commands: &[Option<SignalCommand>]) -> Result<()> {
        self.apply_commands(commands)?;
        self.advance_signal_timers();
        Ok(())
    }

    fn apply_commands(&mut self, commands: &[Option<SignalCommand>]) -> Result<()> {
        let t = self.clock;
        for (i, cmd) in commands.iter().enumerate() {
            let Some(cmd) = *cmd else { continue };
            let plan = &self.net.intersections[i].plan;
            if cmd.phase >= plan.len() {
                return Err(Error::InvalidPhase { intersection: i, phase: cmd.phase, phases: plan.len() });
            }
            let timing = plan.timing;
            let s = &mut self.signals[i];
            if !s.at_decision_point() {
                return Err(Error::Config(format!("intersection {i}: command outside a decision point at t={t}")));
            }
            let hold = cmd.hold.unwrap_or(timing.min_green).max(timing.min_green);
            if !s.started {
                s.started = true;
                s.phase = cmd.phase;
                s.elapsed = 0;
                s.remaining = hold;
            } else if cmd.phase == s.phase {
                s.remaining = hold;
            } else {
                s.pending = Some(cmd.phase);
                s.pending_hold = hold;
                s.mode = SignalMode::Yellow;
                s.remaining = timing.yellow;
                settle(s, timing.all_red);
            }
        }
        for s in &mut self.signals {
            let shown = (s.phase, s.mode);
            if shown != s.shown || (s.started && !s.announced) {
                s.shown = shown;
                s.announced = true;
                if self.log_cfg.signals {
                    self.log.push(Event::Signal { t, intersection: s.intersection, phase: s.phase, mode: s.mode });
                }
            }
        }
        Ok(())
    }

    fn advance_signal_timers(&mut self) {
        for (i, s) in self.signals.iter_mut().enumerate() {
            let timing = self.net.intersections[i].plan.timing;
            if s.mode == SignalMode::Green {
                s.elapsed += DT;
            }
            if s.remaining > 0 {
                s.remaining -= DT;
                if s.remaining == 0 {
                    match s.mode {
                        SignalMode::Yellow => {
                            s.mode = SignalMode::AllRed;
                            s.remaining = timing.all_red;
                        }
                        SignalMode::AllRed => {}
                        SignalMode::Green => {}
                    }
                    settle(s, timing.all_red);
                }
            }
        }
    }

    // Signal changes caused by timers become visible at the next step start;
    // they are logged then (see `apply_commands`).

    /// Moves every vehicle by one step and hands vehicles over between lanes.
    pub fn advance_vehicles(&mut self) {
        let net = self.net;
        let cfg = self.cfg;
        let dt = DT as f64;
        let mut new_speed: Vec<(VehicleId, f64)> = Vec::new();
        for (li, queue) in self.lanes.iter().enumerate() {
            let lane = &net.lanes[li];
            for (k, &vid) in queue.iter().enumerate() {
                let v = &self.vehicles[vid.0];
                let limit = lane.speed_limit;
                let (gap, leader_speed) = if k > 0 {
                    let lead = &self.vehicles[queue[k - 1].0];
                    (lead.position - cfg.vehicle_length - cfg.min_gap - v.position, lead.speed)
                } else {
                    match lane.downstream {
                        None => (f64::INFINITY, limit),
                        Some(node) => {
                            let to_line = lane.length - v.position;
                            if self.may_cross(node, v, to_line) {
                                let next = v.next_lane().expect("internal route continues");
                                match self.lanes[next.0].last() {
                                    Some(&tail) => {
                                        let tv = &self.vehicles[tail.0];
                                        (to_line + tv.position - cfg.vehicle_length - cfg.min_gap, tv.speed)
                                    }
                                    None => (f64::INFINITY, limit),
                                }
                            } else {
                                (to_line, 0.0)
                            }
                        }
                    }
                };
                let mut speed = (v.speed + cfg.accel * dt).min(limit).min(safe_speed(gap, leader_speed, cfg.decel));
                speed = speed.max(v.speed - cfg.decel * dt).max(0.0);
                // Hard constraint: never overlap the obstacle this step.
                speed = speed.min(gap.max(0.0) / dt);
                new_speed.push((vid, speed));
            }
        }
        for (vid, speed) in new_speed {
            let v = &mut self.vehicles[vid.0];
            v.speed = speed;
            v.position += speed * dt;
        }
        self.transfer_vehicles();
    }

    // Whether the front vehicle may pass the stop line of its lane this step.
    fn may_cross(&self, node: IntersectionId, v: &Vehicle, to_line: f64) -> bool {
        let (phase, mode) = self.signals[node.0].shown;
        let Some(turn) = v.next_turn() else { return false };
        if !self.net.phase_allows(node, phase, v.lane(), turn) {
            return false;
        }
        match mode {
            SignalMode::Green => true,
            // Dilemma zone: a vehicle that cannot stop comfortably continues.
            SignalMode::Yellow | SignalMode::AllRed => v.speed * v.speed / (2.0 * self.cfg.decel) > to_line,
        }
    }

    fn transfer_vehicles(&mut self) {
        let t_next = self.clock + DT;
        let net = self.net;
        for li in 0..self.lanes.len() {
            let length = net.lanes[li].length;
            loop {
                let Some(&vid) = self.lanes[li].first() else { break };
                if self.vehicles[vid.0].position <= length {
                    break;
                }
                let lane_id = LaneId(li);
                match self.vehicles[vid.0].next_lane() {
                    None => {
                        self.lanes[li].remove(0);
                        let v = &mut self.vehicles[vid.0];
                        v.state = VehicleState::Exited;
                        v.position = length;
                        self.counters.exited += 1;
                        if self.log_cfg.vehicles {
                            self.log.push(Event::LaneExit { t: t_next, vehicle: vid, lane: lane_id });
                            self.log.push(Event::NetworkExit { t: t_next, vehicle: vid });
                        }
                    }
                    Some(next) => {
                        let overshoot = self.vehicles[vid.0].position - length;
                        let room = self.tail_gap(next, 0.0);
                        if room < 0.0 {
                            // Another vehicle claimed the entry slot this step.
                            let v = &mut self.vehicles[vid.0];
                            v.position = length;
                            v.speed = 0.0;
                            break;
                        }
                        self.lanes[li].remove(0);
                        self.lanes[next.0].push(vid);
                        let v = &mut self.vehicles[vid.0];
                        v.position = overshoot.min(room);
                        v.route_pos += 1;
                        v.lane_entry_time = t_next;
                        let is_cv = v.is_cv;
                        if self.log_cfg.vehicles {
                            self.log.push(Event::LaneExit { t: t_next, vehicle: vid, lane: lane_id });
                            self.log.push(Event::LaneEnter { t: t_next, vehicle: vid, lane: next, is_cv });
                        }
                    }
                }
            }
        }
    }

    /// Delay of a vehicle on its current lane at the current clock, clamped
    /// at zero: `max(0, t - t0 - t_min)`.
    pub fn vehicle_delay(&self, v: &Vehicle) -> f64 {
        let lane = self.net.lane(v.lane());
        let d = self.clock as f64 - v.lane_entry_time as f64 - lane.t_min();
        if d > 0.0 {
            d
        } else {
            0.0
        }
    }

    fn log_snapshots(&mut self) {
        if !self.log_cfg.snapshots {
            return;
        }
        let t = self.clock;
        for (li, lane) in self.net.lanes.iter().enumerate() {
            if lane.downstream.is_none() || self.lanes[li].is_empty() {
                continue;
            }
            let mut n_cv = 0;
            let mut delay_sum = 0.0;
            for &vid in &self.lanes[li] {
                let v = &self.vehicles[vid.0];
                n_cv += v.is_cv as u32;
                delay_sum += self.vehicle_delay(v);
            }
            self.log.push(Event::LaneSnapshot { t, lane: LaneId(li), n: self.lanes[li].len() as u32, n_cv, delay_sum });
        }
    }

    /// Per-incoming-lane waiting counts (all vehicles / CVs) within the
    /// detection radius of `node`.
    pub fn waiting_counts(&self, node: IntersectionId) -> Vec<LaneWaiting> {
        let n = self.net.intersection(node);
        n.incoming
            .iter()
            .map(|&lane| {
                let length = self.net.lane(lane).length;
                let radius = n.detection_radius.min(length);
                let mut w = LaneWaiting { lane, total: 0, cv: 0 };
                for v in self.lane_vehicles(lane) {
                    if length - v.position <= radius && v.is_waiting() {
                        w.total += 1;
                        w.cv += v.is_cv as u32;
                    }
                }
                w
            })
            .collect()
    }

    /// One full step with controllers queried at decision points.
    pub fn step(&mut self, controllers: &mut [&mut dyn Controller]) -> Result<()> {
        if controllers.len() != self.net.intersections.len() {
            return Err(Error::Dimension {
                expected: self.net.intersections.len(),
                found: controllers.len(),
                context: "controllers per intersection",
            });
        }
        self.spawn_arrivals();
        self.log_snapshots();
        let mut commands: Vec<Option<SignalCommand>> = vec![None; self.signals.len()];
        for node in self.decision_points() {
            let forced = self.forced_switch(node);
            let decision = {
                let ctx = DecisionContext { sim: self, intersection: node, forced };
                controllers[node.0].decide(&ctx)?
            };
            let phases = self.net.intersection(node).plan.len();
            if decision.phase >= phases {
                return Err(Error::InvalidPhase { intersection: node.0, phase: decision.phase, phases });
            }
            let current = self.signals[node.0].phase;
            if forced && decision.phase == current {
                return Err(Error::MaxGreenViolated { intersection: node.0, clock: self.clock });
            }
            if self.log_cfg.decisions {
                let waiting = self.waiting_counts(node);
                self.log.push(Event::Decision {
                    t: self.clock,
                    intersection: node,
                    phase: decision.phase,
                    previous_phase: current,
                    forced,
                    probs: decision.probs.clone(),
                    waiting,
                });
            }
            commands[node.0] = Some(SignalCommand { phase: decision.phase, hold: decision.hold });
        }
        self.apply_commands(&commands)?;
        self.advance_vehicles();
        self.advance_signal_timers();
        self.clock += DT;
        for (i, c) in controllers.iter_mut().enumerate() {
            c.after_step(self, IntersectionId(i));
        }
        Ok(())
    }

    pub fn finish(&mut self) {
        let c = self.counters;
        self.log.push(Event::RoundEnd {
            t: self.clock,
            spawned: c.spawned,
            exited: c.exited,
            active: self.active_count(),
            deferred: self.deferred_count(),
            deferred_events: c.deferred_events,
        });
    }

    pub fn into_log(mut self) -> EventLog {
        self.finish();
        self.log
    }

    /// Spawned = exited + active + deferred.
    pub fn conserved(&self) -> bool {
        self.counters.spawned == self.counters.exited + self.active_count() + self.deferred_count()
    }

    /// Entry lanes never count toward lane kinds other than `Entry`.
    pub fn lane_kind(&self, lane: LaneId) -> LaneKind {
        self.net.lane(lane).kind
    }
}

// Pending green starts as soon as zero-length clearance intervals elapse.
fn settle(s: &mut SignalControllerState, all_red: u32) {
    loop {
        match s.mode {
            SignalMode::Yellow if s.remaining == 0 => {
                s.mode = SignalMode::AllRed;
                s.remaining = all_red;
            }
            SignalMode::AllRed if s.remaining == 0 => {
                s.mode = SignalMode::Green;
                s.phase = s.pending.take().unwrap_or(s.phase);
                s.elapsed = 0;
                s.remaining = s.pending_hold;
            }
            _ => break,
        }
    }
}

/// Largest speed from which a vehicle can still stop within `gap` plus the
/// braking distance of a leader moving at `leader_speed`.
pub fn safe_speed(gap: f64, leader_speed: f64, decel: f64) -> f64 {
    if gap == f64::INFINITY {
        return f64::INFINITY;
    }
    let dt = DT as f64;
    let room = gap + leader_speed * leader_speed / (2.0 * decel);
    if room <= 0.0 {
        return 0.0;
    }
    -decel * dt + math::sqrt(decel * decel * dt * dt + 2.0 * decel * room)
}

/// Runs one round of `round_length` seconds and returns its event log.
pub fn run_round(
    net: &RoadNetwork,
    demand: &DemandSpec,
    controllers: &mut [&mut dyn Controller],
    seed: u64,
    round_length: u32,
    log_cfg: LogConfig,
) -> Result<EventLog> {
    let mut sim = Simulation::with_config(net, demand, seed, SimConfig::default(), log_cfg);
    for _ in 0..round_length / DT {
        sim.step(controllers)?;
    }
    Ok(sim.into_log())
}
