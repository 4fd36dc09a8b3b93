//! Static road network: lanes, links, movements, phase plans and demand.
//!
//! Geometry follows a Manhattan grid. Each directed link carries two lanes:
//! lane 0 serves through (and right, when a left lane exists) traffic and
//! lane 1 serves left turns. Every lane is at most one intersection's
//! incoming lane and at most one intersection's outgoing lane.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Default vehicle footprint used for lane capacities (m).
pub const VEHICLE_LENGTH: f64 = 5.0;
/// Default standstill gap between consecutive vehicles (m).
pub const MIN_GAP: f64 = 2.5;
/// 50 km/h.
pub const DEFAULT_SPEED_LIMIT: f64 = 13.89;
pub const DEFAULT_LANE_LENGTH: f64 = 200.0;
pub const DEFAULT_DETECTION_RADIUS: f64 = 200.0;

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub usize);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0
            }
        }
    };
}

id_type!(LaneId);
id_type!(LinkId);
id_type!(IntersectionId);
id_type!(MovementId);

/// Direction of travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn left(self) -> Heading {
        match self {
            Heading::North => Heading::West,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
            Heading::East => Heading::North,
        }
    }

    pub fn right(self) -> Heading {
        self.left().left().left()
    }

    pub fn turned(self, turn: Turn) -> Heading {
        match turn {
            Turn::Through => self,
            Turn::Left => self.left(),
            Turn::Right => self.right(),
        }
    }

    /// East-West roads are the arterials.
    pub fn is_arterial(self) -> bool {
        matches!(self, Heading::East | Heading::West)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Through,
    Left,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Through, Turn::Left, Turn::Right];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    /// Boundary source feeding an intersection.
    Entry,
    /// Between two intersections: outgoing of one, incoming of the next.
    Internal,
    /// Boundary sink leaving the network (infinite storage at its end).
    Exit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub link: LinkId,
    /// Position of the lane within its link (0 = through lane).
    pub index: usize,
    pub length: f64,
    pub speed_limit: f64,
    pub heading: Heading,
    pub kind: LaneKind,
    /// Intersection this lane leaves from, if any.
    pub upstream: Option<IntersectionId>,
    /// Intersection this lane feeds, if any.
    pub downstream: Option<IntersectionId>,
    /// Turns served at the downstream stop line. Empty for exit lanes.
    pub allowed: Vec<Turn>,
}

impl Lane {
    pub fn serves(&self, turn: Turn) -> bool {
        self.allowed.contains(&turn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub heading: Heading,
    pub upstream: Option<IntersectionId>,
    pub downstream: Option<IntersectionId>,
    pub lanes: Vec<LaneId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    pub id: MovementId,
    pub intersection: IntersectionId,
    pub from_lane: LaneId,
    /// Destination link; the vehicle's lane on it depends on its next turn.
    pub to_link: LinkId,
    /// Outgoing lane paired with `from_lane` for pressure.
    pub to_lane: LaneId,
    pub turn: Turn,
    /// The first movement of its lane. Only primary movements form pressure
    /// pairs; a shared right turn folds into the through pair.
    pub primary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub movements: Vec<MovementId>,
}

/// Signal timing parameters in whole seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalTiming {
    pub min_green: u32,
    pub max_green: u32,
    pub yellow: u32,
    pub all_red: u32,
}

impl Default for SignalTiming {
    fn default() -> Self {
        SignalTiming { min_green: 7, max_green: 40, yellow: 1, all_red: 2 }
    }
}

impl SignalTiming {
    pub fn transition(&self) -> u32 {
        self.yellow + self.all_red
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
    #[serde(flatten)]
    pub timing: SignalTiming,
}

impl PhasePlan {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: IntersectionId,
    pub row: usize,
    pub col: usize,
    /// L_in(i), in a canonical approach order (N, E, S, W headings of the
    /// arriving traffic), lane index ascending.
    pub incoming: Vec<LaneId>,
    /// L_out(i), same canonical order.
    pub outgoing: Vec<LaneId>,
    pub movements: Vec<MovementId>,
    pub plan: PhasePlan,
    pub detection_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub rows: usize,
    pub cols: usize,
    pub intersections: Vec<Intersection>,
    pub links: Vec<Link>,
    pub lanes: Vec<Lane>,
    pub movements: Vec<Movement>,
}

/// Phase grouping applied to every intersection of a generated grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseTemplate {
    /// EW movements, then NS movements.
    #[default]
    TwoPhase,
    /// EW through+right, EW left, NS through+right, NS left.
    FourPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub lane_length: f64,
    pub speed_limit: f64,
    pub template: PhaseTemplate,
    pub timing: SignalTiming,
    pub one_way_arterials: bool,
    pub detection_radius: f64,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Self {
        GridSpec { rows, cols, ..Default::default() }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: 2,
            cols: 2,
            lane_length: DEFAULT_LANE_LENGTH,
            speed_limit: DEFAULT_SPEED_LIMIT,
            template: PhaseTemplate::TwoPhase,
            timing: SignalTiming::default(),
            one_way_arterials: false,
            detection_radius: DEFAULT_DETECTION_RADIUS,
        }
    }
}

/// Number of vehicles a lane can store: `floor(length / (vehicle_length +
/// min_gap))`, never below one.
pub fn lane_capacity(length: f64, vehicle_length: f64, min_gap: f64) -> u32 {
    let slot = vehicle_length + min_gap;
    debug_assert!(slot > 0.0);
    let n = math::floor(length / slot);
    if n < 1.0 {
        1
    } else {
        n as u32
    }
}

impl Lane {
    pub fn capacity(&self) -> u32 {
        lane_capacity(self.length, VEHICLE_LENGTH, MIN_GAP)
    }

    /// Free-flow traversal time `length / speed_limit`.
    pub fn t_min(&self) -> f64 {
        self.length / self.speed_limit
    }
}

// One-way arterials alternate direction by row: even rows eastbound.
fn link_exists(spec: &GridSpec, heading: Heading, row: usize) -> bool {
    if !spec.one_way_arterials {
        return true;
    }
    match heading {
        Heading::East => row % 2 == 0,
        Heading::West => row % 2 == 1,
        _ => true,
    }
}

fn lane_turns(through: bool, left: bool, right: bool) -> [Vec<Turn>; 2] {
    let mut l0 = Vec::new();
    let mut l1 = Vec::new();
    if through {
        l0.push(Turn::Through);
        if left {
            if right {
                l0.push(Turn::Right);
            }
            l1.push(Turn::Left);
        } else if right {
            l1.push(Turn::Right);
        } else {
            l1.push(Turn::Through);
        }
    } else {
        if right {
            l0.push(Turn::Right);
        }
        if left {
            l1.push(Turn::Left);
        }
        if l0.is_empty() {
            l0 = l1.clone();
        }
        if l1.is_empty() {
            l1 = l0.clone();
        }
    }
    [l0, l1]
}

/// Generates a `rows x cols` grid of four-approach intersections.
pub fn build_grid(spec: &GridSpec) -> Result<RoadNetwork> {
    let (rows, cols) = (spec.rows, spec.cols);
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!("grid dimensions must be positive, got {rows}x{cols}")));
    }
    if !(spec.lane_length > 0.0) || !spec.lane_length.is_finite() {
        return Err(Error::Config(format!("lane length must be positive, got {}", spec.lane_length)));
    }
    if !(spec.speed_limit > 0.0) || !spec.speed_limit.is_finite() {
        return Err(Error::Config(format!("speed limit must be positive, got {}", spec.speed_limit)));
    }
    if !(spec.detection_radius > 0.0) {
        return Err(Error::Config("detection radius must be positive".to_string()));
    }
    if spec.timing.min_green == 0 || spec.timing.min_green > spec.timing.max_green {
        return Err(Error::Config(format!(
            "green bounds must satisfy 0 < min_green <= max_green, got {} / {}",
            spec.timing.min_green, spec.timing.max_green
        )));
    }

    let node = |r: usize, c: usize| IntersectionId(r * cols + c);
    // Upstream / downstream intersection for a link arriving at or leaving
    // (r, c) with the given heading.
    let neighbour = |r: usize, c: usize, h: Heading| -> Option<(usize, usize)> {
        match h {
            Heading::North if r > 0 => Some((r - 1, c)),
            Heading::South if r + 1 < rows => Some((r + 1, c)),
            Heading::East if c + 1 < cols => Some((r, c + 1)),
            Heading::West if c > 0 => Some((r, c - 1)),
            _ => None,
        }
    };
    let behind = |r: usize, c: usize, h: Heading| -> Option<(usize, usize)> { neighbour(r, c, h.left().left()) };

    let mut links: Vec<Link> = Vec::new();
    // outgoing link of node (r,c) with heading h
    let mut out_link = vec![[None::<LinkId>; 4]; rows * cols];
    let mut in_link = vec![[None::<LinkId>; 4]; rows * cols];
    let hidx = |h: Heading| h as usize;

    for r in 0..rows {
        for c in 0..cols {
            for h in Heading::ALL {
                if !link_exists(spec, h, r) {
                    continue;
                }
                // Link leaving (r, c) heading h.
                let id = LinkId(links.len());
                let down = neighbour(r, c, h).map(|(rr, cc)| node(rr, cc));
                links.push(Link { id, heading: h, upstream: Some(node(r, c)), downstream: down, lanes: vec![] });
                out_link[r * cols + c][hidx(h)] = Some(id);
                if let Some(d) = down {
                    in_link[d.0][hidx(h)] = Some(id);
                }
                // Boundary entry into (r, c) heading h.
                if behind(r, c, h).is_none() {
                    let id = LinkId(links.len());
                    links.push(Link { id, heading: h, upstream: None, downstream: Some(node(r, c)), lanes: vec![] });
                    in_link[r * cols + c][hidx(h)] = Some(id);
                }
            }
        }
    }

    // Lanes: the allowed turns depend on the downstream intersection.
    let mut lanes: Vec<Lane> = Vec::new();
    for link in links.iter_mut() {
        let turns: [Vec<Turn>; 2] = match link.downstream {
            Some(d) => {
                let (r, c) = (d.0 / cols, d.0 % cols);
                let has = |t: Turn| out_link[r * cols + c][hidx(link.heading.turned(t))].is_some();
                lane_turns(has(Turn::Through), has(Turn::Left), has(Turn::Right))
            }
            None => [Vec::new(), Vec::new()],
        };
        let kind = match (link.upstream, link.downstream) {
            (None, _) => LaneKind::Entry,
            (_, None) => LaneKind::Exit,
            _ => LaneKind::Internal,
        };
        for (index, allowed) in turns.into_iter().enumerate() {
            let id = LaneId(lanes.len());
            lanes.push(Lane {
                id,
                link: link.id,
                index,
                length: spec.lane_length,
                speed_limit: spec.speed_limit,
                heading: link.heading,
                kind,
                upstream: link.upstream,
                downstream: link.downstream,
                allowed,
            });
            link.lanes.push(id);
        }
    }

    let mut movements: Vec<Movement> = Vec::new();
    let mut intersections = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let id = node(r, c);
            let mut incoming = Vec::new();
            let mut outgoing = Vec::new();
            let mut mv_ids = Vec::new();
            for h in Heading::ALL {
                if let Some(l) = out_link[id.0][hidx(h)] {
                    outgoing.extend(links[l.0].lanes.iter().copied());
                }
            }
            for h in Heading::ALL {
                let Some(l) = in_link[id.0][hidx(h)] else { continue };
                for &lane_id in &links[l.0].lanes {
                    incoming.push(lane_id);
                    let lane = &lanes[lane_id.0];
                    for (k, &turn) in lane.allowed.iter().enumerate() {
                        let to_link =
                            out_link[id.0][hidx(h.turned(turn))].expect("allowed turn has a destination link");
                        let to_lane = links[to_link.0].lanes[lane.index.min(links[to_link.0].lanes.len() - 1)];
                        let mid = MovementId(movements.len());
                        movements.push(Movement {
                            id: mid,
                            intersection: id,
                            from_lane: lane_id,
                            to_link,
                            to_lane,
                            turn,
                            primary: k == 0,
                        });
                        mv_ids.push(mid);
                    }
                }
            }
            let plan = phase_plan(spec.template, spec.timing, &mv_ids, &movements, &lanes);
            intersections.push(Intersection {
                id,
                row: r,
                col: c,
                incoming,
                outgoing,
                movements: mv_ids,
                plan,
                detection_radius: spec.detection_radius,
            });
        }
    }

    let net = RoadNetwork { rows, cols, intersections, links, lanes, movements };
    let violations = validate(&net);
    if !violations.is_empty() {
        return Err(Error::InvalidNetwork(violations));
    }
    Ok(net)
}

fn phase_plan(
    template: PhaseTemplate,
    timing: SignalTiming,
    mv_ids: &[MovementId],
    movements: &[Movement],
    lanes: &[Lane],
) -> PhasePlan {
    let arterial = |m: &Movement| lanes[m.from_lane.0].heading.is_arterial();
    let groups: Vec<(&str, fn(&Movement, bool) -> bool)> = match template {
        PhaseTemplate::TwoPhase => vec![("EW", |_, art| art), ("NS", |_, art| !art)],
        PhaseTemplate::FourPhase => vec![
            ("EW-through", |m, art| art && m.turn != Turn::Left),
            ("EW-left", |m, art| art && m.turn == Turn::Left),
            ("NS-through", |m, art| !art && m.turn != Turn::Left),
            ("NS-left", |m, art| !art && m.turn == Turn::Left),
        ],
    };
    let mut phases = Vec::new();
    for (name, pick) in groups {
        let set: Vec<MovementId> = mv_ids
            .iter()
            .copied()
            .filter(|&id| {
                let m = &movements[id.0];
                pick(m, arterial(m))
            })
            .collect();
        if !set.is_empty() {
            phases.push(Phase { name: name.to_string(), movements: set });
        }
    }
    PhasePlan { phases, timing }
}

/// Checks every structural invariant and returns all violations found.
pub fn validate(net: &RoadNetwork) -> Vec<String> {
    let mut v = Vec::new();
    let n_lanes = net.lanes.len();
    let n_links = net.links.len();
    let n_nodes = net.intersections.len();

    if n_nodes == 0 {
        v.push("network has no intersections".to_string());
    }
    for (i, lane) in net.lanes.iter().enumerate() {
        if lane.id.0 != i {
            v.push(format!("lane {i}: id {} out of order", lane.id.0));
        }
        if !(lane.length > 0.0) || !lane.length.is_finite() {
            v.push(format!("lane {i}: length must be positive, got {}", lane.length));
        }
        if !(lane.speed_limit > 0.0) || !lane.speed_limit.is_finite() {
            v.push(format!("lane {i}: speed limit must be positive, got {}", lane.speed_limit));
        }
        if lane.link.0 >= n_links {
            v.push(format!("lane {i}: unknown link {}", lane.link.0));
        } else if !net.links[lane.link.0].lanes.contains(&lane.id) {
            v.push(format!("lane {i}: not listed by its link {}", lane.link.0));
        }
        for node in [lane.upstream, lane.downstream].into_iter().flatten() {
            if node.0 >= n_nodes {
                v.push(format!("lane {i}: unknown intersection {}", node.0));
            }
        }
        let expected_kind = match (lane.upstream, lane.downstream) {
            (None, Some(_)) => Some(LaneKind::Entry),
            (Some(_), Some(_)) => Some(LaneKind::Internal),
            (Some(_), None) => Some(LaneKind::Exit),
            (None, None) => None,
        };
        match expected_kind {
            None => v.push(format!("lane {i}: attached to no intersection")),
            Some(k) if k != lane.kind => v.push(format!("lane {i}: kind {:?} disagrees with its endpoints", lane.kind)),
            _ => {}
        }
        if let Some(d) = lane.downstream {
            if d.0 < n_nodes {
                let count = net.intersections[d.0].incoming.iter().filter(|&&l| l == lane.id).count();
                if count != 1 {
                    v.push(format!("lane {i}: listed {count} times as incoming of intersection {}", d.0));
                }
            }
            if lane.allowed.is_empty() {
                v.push(format!("lane {i}: incoming lane serves no movement"));
            }
        }
        if let Some(u) = lane.upstream {
            if u.0 < n_nodes {
                let count = net.intersections[u.0].outgoing.iter().filter(|&&l| l == lane.id).count();
                if count != 1 {
                    v.push(format!("lane {i}: listed {count} times as outgoing of intersection {}", u.0));
                }
            }
        }
    }
    for (k, link) in net.links.iter().enumerate() {
        if link.lanes.is_empty() {
            v.push(format!("link {k}: has no lanes"));
        }
        if link.lanes.iter().any(|l| l.0 >= n_lanes) {
            v.push(format!("link {k}: unknown lane"));
        }
    }
    for (k, m) in net.movements.iter().enumerate() {
        if m.from_lane.0 >= n_lanes || m.to_lane.0 >= n_lanes || m.intersection.0 >= n_nodes {
            v.push(format!("movement {k}: dangling reference"));
            continue;
        }
        let from = &net.lanes[m.from_lane.0];
        let to = &net.lanes[m.to_lane.0];
        if from.downstream != Some(m.intersection) {
            v.push(format!(
                "movement {k}: from_lane {} is not incoming at intersection {}",
                from.id.0, m.intersection.0
            ));
        }
        if to.upstream != Some(m.intersection) {
            v.push(format!("movement {k}: to_lane {} is not outgoing at intersection {}", to.id.0, m.intersection.0));
        }
        if !from.serves(m.turn) {
            v.push(format!("movement {k}: lane {} does not allow {:?}", from.id.0, m.turn));
        }
    }
    for (i, node) in net.intersections.iter().enumerate() {
        let plan = &node.plan;
        if plan.phases.is_empty() {
            v.push(format!("intersection {i}: empty phase plan"));
        }
        if plan.timing.min_green > plan.timing.max_green {
            v.push(format!(
                "intersection {i}: green bound order (min_green {} > max_green {})",
                plan.timing.min_green, plan.timing.max_green
            ));
        }
        if plan.timing.min_green == 0 {
            v.push(format!("intersection {i}: min_green must be positive"));
        }
        if !(node.detection_radius > 0.0) {
            v.push(format!("intersection {i}: detection radius must be positive"));
        }
        for &mid in &node.movements {
            if mid.0 >= net.movements.len() {
                continue;
            }
            if !plan.phases.iter().any(|p| p.movements.contains(&mid)) {
                v.push(format!("intersection {i}: unreachable movement {} (in no phase)", mid.0));
            }
        }
        for p in &plan.phases {
            for mid in &p.movements {
                if !node.movements.contains(mid) {
                    v.push(format!("intersection {i}: phase {} grants foreign movement {}", p.name, mid.0));
                }
            }
        }
        for a in 0..plan.phases.len() {
            for b in (a + 1)..plan.phases.len() {
                let mut x = plan.phases[a].movements.clone();
                let mut y = plan.phases[b].movements.clone();
                x.sort_unstable();
                y.sort_unstable();
                if x == y {
                    v.push(format!("intersection {i}: phases {a} and {b} are identical"));
                }
            }
        }
    }
    // Connectivity over intersections through links.
    if n_nodes > 0 {
        let mut seen = vec![false; n_nodes];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for link in &net.links {
                if let (Some(u), Some(d)) = (link.upstream, link.downstream) {
                    if u.0 >= n_nodes || d.0 >= n_nodes {
                        continue;
                    }
                    for (a, b) in [(u.0, d.0), (d.0, u.0)] {
                        if a == x && !seen[b] {
                            seen[b] = true;
                            stack.push(b);
                        }
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            v.push("network is not connected".to_string());
        }
    }
    v
}

impl RoadNetwork {
    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id.0]
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.0]
    }

    pub fn intersection(&self, id: IntersectionId) -> &Intersection {
        &self.intersections[id.0]
    }

    pub fn movement(&self, id: MovementId) -> &Movement {
        &self.movements[id.0]
    }

    pub fn entry_links(&self) -> impl Iterator<Item = &Link> {
        self.links.iter().filter(|l| l.upstream.is_none())
    }

    pub fn validate(&self) -> Result<()> {
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidNetwork(v))
        }
    }

    /// Pressure pairs (l, m) of an intersection: one per incoming lane, from
    /// its primary movement, restricted to movements some phase grants.
    pub fn pressure_pairs(&self, node: IntersectionId) -> Vec<(LaneId, LaneId)> {
        let n = self.intersection(node);
        let granted = |mid: MovementId| n.plan.phases.iter().any(|p| p.movements.contains(&mid));
        n.movements
            .iter()
            .map(|&mid| self.movement(mid))
            .filter(|m| m.primary && granted(m.id))
            .map(|m| (m.from_lane, m.to_lane))
            .collect()
    }

    /// Pressure pairs of the primary movements granted by one phase.
    pub fn phase_pairs(&self, node: IntersectionId, phase: usize) -> Vec<(LaneId, LaneId)> {
        let n = self.intersection(node);
        n.plan.phases[phase]
            .movements
            .iter()
            .map(|&mid| self.movement(mid))
            .filter(|m| m.primary)
            .map(|m| (m.from_lane, m.to_lane))
            .collect()
    }

    /// Whether phase `phase` of `node` grants green to `(lane, turn)`.
    pub fn phase_allows(&self, node: IntersectionId, phase: usize, lane: LaneId, turn: Turn) -> bool {
        self.intersection(node).plan.phases[phase].movements.iter().any(|&mid| {
            let m = self.movement(mid);
            m.from_lane == lane && m.turn == turn
        })
    }

    /// Lane on `link` a vehicle uses when its next turn is `next_turn`
    /// (`None` on exit links, where `prev_turn` picks the lane instead).
    pub fn lane_for(&self, link: LinkId, next_turn: Option<Turn>, prev_turn: Option<Turn>) -> LaneId {
        let l = self.link(link);
        match next_turn {
            Some(t) => l.lanes.iter().copied().find(|&id| self.lane(id).serves(t)).unwrap_or(l.lanes[0]),
            None => {
                let idx = if prev_turn == Some(Turn::Left) { 1 } else { 0 };
                l.lanes[idx.min(l.lanes.len() - 1)]
            }
        }
    }

    /// Destination link of `turn` for traffic arriving on `link`.
    pub fn turn_target(&self, link: LinkId, turn: Turn) -> Option<LinkId> {
        let l = self.link(link);
        let node = l.downstream?;
        let heading = l.heading.turned(turn);
        self.intersection(node)
            .outgoing
            .iter()
            .map(|&lane| self.lane(lane).link)
            .find(|&k| self.link(k).heading == heading)
    }

    /// Whether the phase serves arterial traffic (all its movements start on
    /// East-West lanes).
    pub fn phase_is_arterial(&self, node: IntersectionId, phase: usize) -> bool {
        let p = &self.intersection(node).plan.phases[phase];
        !p.movements.is_empty()
            && p.movements.iter().all(|&mid| self.lane(self.movement(mid).from_lane).heading.is_arterial())
    }

    pub fn incoming_lane_count(&self) -> usize {
        self.intersections.iter().map(|n| n.incoming.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Demand
// ---------------------------------------------------------------------------

/// Piecewise-constant arrival rate in vehicles per hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    /// Start time (s) of each stage; first must be 0, strictly increasing.
    pub stage_starts: Vec<u32>,
    pub rates: Vec<f64>,
}

impl RateSchedule {
    pub fn constant(rate: f64) -> Self {
        RateSchedule { stage_starts: vec![0], rates: vec![rate] }
    }

    pub fn staged(rates: &[f64], stage_len: u32) -> Self {
        RateSchedule { stage_starts: (0..rates.len() as u32).map(|i| i * stage_len).collect(), rates: rates.to_vec() }
    }

    pub fn rate_at(&self, t: u32) -> f64 {
        let mut rate = 0.0;
        for (start, r) in self.stage_starts.iter().zip(&self.rates) {
            if *start <= t {
                rate = *r;
            } else {
                break;
            }
        }
        rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnProportions {
    pub through: f64,
    pub left: f64,
    pub right: f64,
}

impl Default for TurnProportions {
    fn default() -> Self {
        TurnProportions { through: 0.8, left: 0.1, right: 0.1 }
    }
}

impl TurnProportions {
    pub fn get(&self, turn: Turn) -> f64 {
        match turn {
            Turn::Through => self.through,
            Turn::Left => self.left,
            Turn::Right => self.right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryDemand {
    pub link: LinkId,
    pub schedule: RateSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSpec {
    /// One arrival stream per boundary entry approach.
    pub entries: Vec<EntryDemand>,
    pub turns: TurnProportions,
    pub cv_penetration: f64,
}

/// Named demand levels (arterial / side-street, veh/h).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemandPattern {
    DynamicTrain,
    DynamicTest,
    Fixed600,
    Fixed800,
}

pub const DYNAMIC_STAGE_SECONDS: u32 = 600;

impl DemandPattern {
    /// (arterial rates, side-street rates) per stage.
    pub fn stages(self) -> (&'static [f64], &'static [f64]) {
        match self {
            DemandPattern::DynamicTrain => (&[500.0, 700.0, 1000.0], &[250.0, 350.0, 500.0]),
            DemandPattern::DynamicTest => (&[300.0, 600.0, 800.0], &[150.0, 300.0, 400.0]),
            DemandPattern::Fixed600 => (&[600.0], &[300.0]),
            DemandPattern::Fixed800 => (&[800.0], &[400.0]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DemandPattern::DynamicTrain => "dynamic-train",
            DemandPattern::DynamicTest => "dynamic-test",
            DemandPattern::Fixed600 => "fixed-600",
            DemandPattern::Fixed800 => "fixed-800",
        }
    }

    pub fn demand(self, net: &RoadNetwork, turns: TurnProportions, cv_penetration: f64) -> DemandSpec {
        let (art, side) = self.stages();
        DemandSpec::arterial_side(net, art, side, DYNAMIC_STAGE_SECONDS, turns, cv_penetration)
    }
}

impl DemandSpec {
    /// Same schedule on every entry; arterial (EW) and side-street (NS)
    /// entries get their own stage rates.
    pub fn arterial_side(
        net: &RoadNetwork,
        arterial: &[f64],
        side: &[f64],
        stage_len: u32,
        turns: TurnProportions,
        cv_penetration: f64,
    ) -> Self {
        let entries = net
            .entry_links()
            .map(|l| EntryDemand {
                link: l.id,
                schedule: RateSchedule::staged(if l.heading.is_arterial() { arterial } else { side }, stage_len),
            })
            .collect();
        DemandSpec { entries, turns, cv_penetration }
    }

    pub fn uniform(net: &RoadNetwork, rate: f64, turns: TurnProportions, cv_penetration: f64) -> Self {
        DemandSpec::arterial_side(net, &[rate], &[rate], 1, turns, cv_penetration)
    }

    pub fn with_penetration(mut self, p: f64) -> Self {
        self.cv_penetration = p;
        self
    }

    pub fn validate(&self, net: &RoadNetwork) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0..=1.0).contains(&self.cv_penetration) {
            v.push(format!("cv_penetration {} outside [0, 1]", self.cv_penetration));
        }
        let t = &self.turns;
        for (name, x) in [("through", t.through), ("left", t.left), ("right", t.right)] {
            if !(0.0..=1.0).contains(&x) {
                v.push(format!("turn fraction {name} = {x} outside [0, 1]"));
            }
        }
        let sum = t.through + t.left + t.right;
        if (sum - 1.0).abs() > 1e-9 {
            v.push(format!("turn fractions sum to {sum}, expected 1"));
        }
        for e in &self.entries {
            if e.link.0 >= net.links.len() || net.links[e.link.0].upstream.is_some() {
                v.push(format!("demand on link {} which is not a boundary entry", e.link.0));
            }
            let s = &e.schedule;
            if s.rates.is_empty() || s.rates.len() != s.stage_starts.len() {
                v.push(format!("link {}: schedule needs one rate per stage", e.link.0));
            }
            if s.stage_starts.first().is_some_and(|&x| x != 0) {
                v.push(format!("link {}: first stage must start at 0", e.link.0));
            }
            if s.stage_starts.windows(2).any(|w| w[0] >= w[1]) {
                v.push(format!("link {}: stage boundaries must be strictly increasing", e.link.0));
            }
            if s.rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
                v.push(format!("link {}: rates must be finite and non-negative", e.link.0));
            }
            if s.rates.iter().any(|r| *r > 3600.0) {
                v.push(format!("link {}: rate above one vehicle per second", e.link.0));
            }
        }
        v
    }
}
