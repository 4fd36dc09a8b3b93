//! Observations, pressure and reward.
//!
//! Every feature vector follows [`ObservationLayout`]:
//!
//! ```text
//! CV part      [phase one-hot | d / max_green | 3 segment counts per incoming lane
//!               | 1 count per outgoing lane | delay ratio per incoming lane]
//! non-CV part  [3 segment counts per incoming lane | 1 count per outgoing lane
//!               | delay ratio per incoming lane]
//! ```
//!
//! Segment counts are divided by the segment capacity and outgoing counts by
//! the capacity of the detected span. Lanes appear in intersection order
//! (approaches N, E, S, W, lane 0 then lane 1).
//!
//! `s` is the all-vehicle state in the CV part's shape; the critic input
//! `o` is `o_cv ++ o_noncv`.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::fingerprint::Fnv64;
use crate::math;
use crate::netmodel::{Intersection, IntersectionId, LaneId, RoadNetwork, MIN_GAP, VEHICLE_LENGTH};
use crate::simcore::{Simulation, Vehicle};

pub const SEGMENTS: usize = 3;

/// Which vehicles a feature counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    Cv,
    NonCv,
}

impl Subset {
    pub fn contains(self, is_cv: bool) -> bool {
        match self {
            Subset::All => true,
            Subset::Cv => is_cv,
            Subset::NonCv => !is_cv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationLayout {
    pub phases: usize,
    pub incoming: usize,
    pub outgoing: usize,
    /// Phase-duration feature present.
    pub duration: bool,
    /// Delay-ratio features present.
    pub delay: bool,
}

/// Meaning of one position in the full observation `o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feature {
    Phase { phase: usize },
    Duration,
    Segment { lane: usize, segment: usize, cv: bool },
    Outgoing { lane: usize, cv: bool },
    Delay { lane: usize, cv: bool },
}

impl ObservationLayout {
    /// CVLight layout for an intersection.
    pub fn cvlight(node: &Intersection) -> Self {
        ObservationLayout {
            phases: node.plan.len(),
            incoming: node.incoming.len(),
            outgoing: node.outgoing.len(),
            duration: true,
            delay: true,
        }
    }

    /// PressLight layout: phase, segmented incoming counts, outgoing counts.
    pub fn presslight(node: &Intersection) -> Self {
        ObservationLayout { duration: false, delay: false, ..ObservationLayout::cvlight(node) }
    }

    fn traffic_width(&self) -> usize {
        SEGMENTS * self.incoming + self.outgoing + if self.delay { self.incoming } else { 0 }
    }

    pub fn cv_width(&self) -> usize {
        self.phases + self.duration as usize + self.traffic_width()
    }

    pub fn noncv_width(&self) -> usize {
        self.traffic_width()
    }

    pub fn full_width(&self) -> usize {
        self.cv_width() + self.noncv_width()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_str("cvlight-observation-layout/1")
            .write_u64(self.phases as u64)
            .write_u64(self.incoming as u64)
            .write_u64(self.outgoing as u64)
            .write_u64(self.duration as u64)
            .write_u64(self.delay as u64);
        h.finish()
    }

    /// Labels for every position of `o = o_cv ++ o_noncv`.
    pub fn features(&self) -> Vec<Feature> {
        let mut f = Vec::with_capacity(self.full_width());
        for phase in 0..self.phases {
            f.push(Feature::Phase { phase });
        }
        if self.duration {
            f.push(Feature::Duration);
        }
        for cv in [true, false] {
            for lane in 0..self.incoming {
                for segment in 0..SEGMENTS {
                    f.push(Feature::Segment { lane, segment, cv });
                }
            }
            for lane in 0..self.outgoing {
                f.push(Feature::Outgoing { lane, cv });
            }
            if self.delay {
                for lane in 0..self.incoming {
                    f.push(Feature::Delay { lane, cv });
                }
            }
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationBundle {
    pub intersection: IntersectionId,
    pub clock: u32,
    pub layout: ObservationLayout,
    /// All-vehicle state (CV-part shape).
    pub s: Vec<f64>,
    pub o_cv: Vec<f64>,
    pub o_noncv: Vec<f64>,
    /// Detected counts: incoming lanes then outgoing lanes.
    pub n: Vec<u32>,
    pub n_cv: Vec<u32>,
    pub n_noncv: Vec<u32>,
    /// Delay ratios per incoming lane.
    pub x: Vec<f64>,
    pub x_cv: Vec<f64>,
    pub x_noncv: Vec<f64>,
}

impl ObservationBundle {
    /// `o = o_cv ++ o_noncv`.
    pub fn full(&self) -> Vec<f64> {
        let mut o = Vec::with_capacity(self.o_cv.len() + self.o_noncv.len());
        o.extend_from_slice(&self.o_cv);
        o.extend_from_slice(&self.o_noncv);
        o
    }
}

/// `length / speed_limit`.
pub fn t_min(length: f64, speed_limit: f64) -> f64 {
    length / speed_limit
}

/// Span of a lane watched by a detector of the given radius.
pub fn detection_span(length: f64, radius: f64) -> f64 {
    if radius < length {
        radius
    } else {
        length
    }
}

/// Scaled average delay `sum(delays) / (n * t_min)` over per-vehicle
/// (already clamped) delays; 0 for an empty set.
pub fn delay_ratio_of(t_min: f64, delays: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut sum = 0.0;
    for d in delays {
        n += 1;
        sum += d;
    }
    if n == 0 {
        0.0
    } else {
        sum / (n as f64 * t_min)
    }
}

/// `max(0, t - t0 - t_min)`.
pub fn vehicle_delay(clock: u32, t0: u32, t_min: f64) -> f64 {
    let d = clock as f64 - t0 as f64 - t_min;
    if d > 0.0 {
        d
    } else {
        0.0
    }
}

/// Segment index (0 nearest the stop line) of a vehicle `dist` metres from
/// the stop line, or `None` when outside the span.
pub fn segment_of(dist: f64, span: f64) -> Option<usize> {
    if !(0.0..=span).contains(&dist) {
        return None;
    }
    let seg = span / SEGMENTS as f64;
    Some((math::floor(dist / seg) as usize).min(SEGMENTS - 1))
}

/// Vehicles of `lane` detected by the intersection at its downstream end.
fn detected_incoming<'a>(sim: &'a Simulation<'_>, lane: LaneId, radius: f64) -> impl Iterator<Item = &'a Vehicle> + 'a {
    let length = sim.net.lane(lane).length;
    let span = detection_span(length, radius);
    sim.lane_vehicles(lane).filter(move |v| length - v.position <= span)
}

/// Vehicles of `lane` detected by the intersection at its upstream end.
fn detected_outgoing<'a>(sim: &'a Simulation<'_>, lane: LaneId, radius: f64) -> impl Iterator<Item = &'a Vehicle> + 'a {
    let span = detection_span(sim.net.lane(lane).length, radius);
    sim.lane_vehicles(lane).filter(move |v| v.position <= span)
}

pub fn segment_counts(sim: &Simulation<'_>, lane: LaneId, radius: f64, subset: Subset) -> [u32; SEGMENTS] {
    let length = sim.net.lane(lane).length;
    let span = detection_span(length, radius);
    let mut c = [0u32; SEGMENTS];
    for v in sim.lane_vehicles(lane) {
        if subset.contains(v.is_cv) {
            if let Some(k) = segment_of(length - v.position, span) {
                c[k] += 1;
            }
        }
    }
    c
}

pub fn delay_ratio(sim: &Simulation<'_>, lane: LaneId, radius: f64, subset: Subset) -> f64 {
    let tm = sim.net.lane(lane).t_min();
    delay_ratio_of(
        tm,
        detected_incoming(sim, lane, radius)
            .filter(|v| subset.contains(v.is_cv))
            .map(|v| vehicle_delay(sim.clock, v.lane_entry_time, tm)),
    )
}

/// Vehicles an intersection detects on one of its lanes.
pub fn detected_count(sim: &Simulation<'_>, node: IntersectionId, lane: LaneId, subset: Subset) -> u32 {
    let n = sim.net.intersection(node);
    let r = n.detection_radius;
    let it: u32 = if sim.net.lane(lane).downstream == Some(node) {
        detected_incoming(sim, lane, r).filter(|v| subset.contains(v.is_cv)).count() as u32
    } else {
        detected_outgoing(sim, lane, r).filter(|v| subset.contains(v.is_cv)).count() as u32
    };
    it
}

fn span_capacity(span: f64) -> f64 {
    let c = math::floor(span / (VEHICLE_LENGTH + MIN_GAP));
    if c < 1.0 {
        1.0
    } else {
        c
    }
}

/// Builds `s`, `o_cv` and `o_noncv` for an intersection.
pub fn observe(sim: &Simulation<'_>, node: IntersectionId, layout: &ObservationLayout) -> ObservationBundle {
    let net = sim.net;
    let n = net.intersection(node);
    let sig = &sim.signals[node.0];
    let radius = n.detection_radius;

    let mut head = vec![0.0; layout.phases];
    if sig.phase < layout.phases {
        head[sig.phase] = 1.0;
    }
    if layout.duration {
        head.push(sig.elapsed as f64 / n.plan.timing.max_green.max(1) as f64);
    }

    let lanes = n.incoming.len() + n.outgoing.len();
    let mut b = ObservationBundle {
        intersection: node,
        clock: sim.clock,
        layout: *layout,
        s: head.clone(),
        o_cv: head,
        o_noncv: Vec::with_capacity(layout.noncv_width()),
        n: Vec::with_capacity(lanes),
        n_cv: Vec::with_capacity(lanes),
        n_noncv: Vec::with_capacity(lanes),
        x: Vec::with_capacity(n.incoming.len()),
        x_cv: Vec::with_capacity(n.incoming.len()),
        x_noncv: Vec::with_capacity(n.incoming.len()),
    };

    for &lane in &n.incoming {
        let span = detection_span(net.lane(lane).length, radius);
        let cap = span_capacity(span / SEGMENTS as f64);
        let all = segment_counts(sim, lane, radius, Subset::All);
        let cv = segment_counts(sim, lane, radius, Subset::Cv);
        for k in 0..SEGMENTS {
            b.s.push(all[k] as f64 / cap);
            b.o_cv.push(cv[k] as f64 / cap);
            b.o_noncv.push((all[k] - cv[k]) as f64 / cap);
        }
        let total: u32 = all.iter().sum();
        let total_cv: u32 = cv.iter().sum();
        b.n.push(total);
        b.n_cv.push(total_cv);
        b.n_noncv.push(total - total_cv);
    }
    for &lane in &n.outgoing {
        let cap = span_capacity(detection_span(net.lane(lane).length, radius));
        let all = detected_outgoing(sim, lane, radius).count() as u32;
        let cv = detected_outgoing(sim, lane, radius).filter(|v| v.is_cv).count() as u32;
        b.s.push(all as f64 / cap);
        b.o_cv.push(cv as f64 / cap);
        b.o_noncv.push((all - cv) as f64 / cap);
        b.n.push(all);
        b.n_cv.push(cv);
        b.n_noncv.push(all - cv);
    }
    for &lane in &n.incoming {
        b.x.push(delay_ratio(sim, lane, radius, Subset::All));
        b.x_cv.push(delay_ratio(sim, lane, radius, Subset::Cv));
        b.x_noncv.push(delay_ratio(sim, lane, radius, Subset::NonCv));
    }
    if layout.delay {
        b.s.extend_from_slice(&b.x);
        b.o_cv.extend_from_slice(&b.x_cv);
        b.o_noncv.extend_from_slice(&b.x_noncv);
    }
    debug_assert_eq!(b.o_cv.len(), layout.cv_width());
    debug_assert_eq!(b.o_noncv.len(), layout.noncv_width());
    b
}

/// `|sum over pairs (l, m) of (load(l) - load(m))|`.
pub fn pressure_of(pairs: &[(LaneId, LaneId)], mut load: impl FnMut(LaneId) -> f64) -> f64 {
    let mut p = 0.0;
    for &(l, m) in pairs {
        p += load(l) - load(m);
    }
    p.abs()
}

/// Signed pressure of one phase: `sum over its pairs of (load(l) - load(m))`.
pub fn phase_pressure_of(pairs: &[(LaneId, LaneId)], mut load: impl FnMut(LaneId) -> f64) -> f64 {
    pairs.iter().map(|&(l, m)| load(l) - load(m)).sum()
}

/// Detected count over lane capacity.
pub fn lane_load(sim: &Simulation<'_>, node: IntersectionId, lane: LaneId, subset: Subset) -> f64 {
    detected_count(sim, node, lane, subset) as f64 / sim.net.lane(lane).capacity() as f64
}

/// Intersection pressure from all detected vehicles.
pub fn pressure(sim: &Simulation<'_>, node: IntersectionId) -> f64 {
    pressure_subset(sim, node, Subset::All)
}

pub fn pressure_subset(sim: &Simulation<'_>, node: IntersectionId, subset: Subset) -> f64 {
    let pairs = sim.net.pressure_pairs(node);
    pressure_of(&pairs, |l| lane_load(sim, node, l, subset))
}

/// `-pressure`, always computed from all vehicles.
pub fn reward(sim: &Simulation<'_>, node: IntersectionId) -> f64 {
    -pressure(sim, node)
}

/// Per-phase signed pressure over the given vehicle subset.
pub fn phase_pressures(net: &RoadNetwork, sim: &Simulation<'_>, node: IntersectionId, subset: Subset) -> Vec<f64> {
    let phases = net.intersection(node).plan.len();
    (0..phases).map(|p| phase_pressure_of(&net.phase_pairs(node, p), |l| lane_load(sim, node, l, subset))).collect()
}
