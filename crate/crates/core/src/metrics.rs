//! Delay metric, round aggregation, relative importance and policy traces.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::netmodel::{IntersectionId, RoadNetwork};
use crate::neural::MlpParams;
use crate::simcore::{Event, EventLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// Time-averaged delay per vehicle for each intersection.
    pub per_intersection: Vec<f64>,
    pub m_delay: f64,
    pub throughput: u64,
    pub spawned: u64,
    pub deferred: u64,
    pub seed: u64,
}

impl RoundMetrics {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Average delay per vehicle per intersection from the lane snapshots of one
/// round.
///
/// For every intersection and snapshot time, the summed clamped delay of the
/// vehicles on its incoming lanes is divided by their number; times without
/// vehicles are skipped. The per-intersection time averages are then averaged
/// over intersections.
pub fn m_delay(log: &EventLog, net: &RoadNetwork) -> RoundMetrics {
    let k = net.intersections.len();
    let mut sum = vec![0.0; k];
    let mut steps = vec![0u64; k];
    let mut cur_t: Option<u32> = None;
    let mut d = vec![0.0; k];
    let mut n = vec![0u64; k];
    let flush = |d: &mut [f64], n: &mut [u64], sum: &mut [f64], steps: &mut [u64]| {
        for i in 0..k {
            if n[i] > 0 {
                sum[i] += d[i] / n[i] as f64;
                steps[i] += 1;
            }
            d[i] = 0.0;
            n[i] = 0;
        }
    };
    let mut rm =
        RoundMetrics { per_intersection: vec![], m_delay: 0.0, throughput: 0, spawned: 0, deferred: 0, seed: 0 };
    for e in log.iter() {
        match *e {
            Event::LaneSnapshot { t, lane, n: count, delay_sum, .. } => {
                if cur_t != Some(t) {
                    flush(&mut d, &mut n, &mut sum, &mut steps);
                    cur_t = Some(t);
                }
                if let Some(node) = net.lane(lane).downstream {
                    d[node.0] += delay_sum;
                    n[node.0] += count as u64;
                }
            }
            Event::RoundEnd { spawned, exited, deferred_events, .. } => {
                rm.throughput = exited;
                rm.spawned = spawned;
                rm.deferred = deferred_events;
            }
            _ => {}
        }
    }
    flush(&mut d, &mut n, &mut sum, &mut steps);
    rm.per_intersection = (0..k).map(|i| if steps[i] > 0 { sum[i] / steps[i] as f64 } else { 0.0 }).collect();
    rm.m_delay = if k > 0 { rm.per_intersection.iter().sum::<f64>() / k as f64 } else { 0.0 };
    rm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single round.
    pub std: f64,
    pub rounds: usize,
    /// Set when `std` is 0 only because there was a single round.
    pub single_round: bool,
}

pub fn mean_std(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate { mean: 0.0, std: 0.0, rounds: 0, single_round: false };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        math::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
    } else {
        0.0
    };
    Aggregate { mean, std, rounds: n, single_round: n == 1 }
}

/// Mean and sample standard deviation of `M_delay` over rounds.
pub fn aggregate_rounds(rounds: &[RoundMetrics]) -> Aggregate {
    let v: Vec<f64> = rounds.iter().map(|r| r.m_delay).collect();
    mean_std(&v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeImportance {
    /// Percentage per input; sums to 100.
    pub ri: Vec<f64>,
    pub threshold: f64,
    /// Hidden neurons with at least one retained weight.
    pub hidden_used: usize,
}

/// Garson-style importance of each input from the first layer of `critic`.
///
/// Weights with `|w| <= threshold` are dropped; each hidden neuron's
/// retained magnitudes are normalized to sum to one, then summed per input
/// and rescaled to percent.
pub fn relative_importance(critic: &MlpParams, threshold: f64) -> Result<RelativeImportance> {
    let layer = critic.layers.first().ok_or(Error::Config("critic has no layers".into()))?;
    let mut acc = vec![0.0; layer.fan_in];
    let mut used = 0;
    for h in 0..layer.fan_out {
        let col: Vec<f64> = (0..layer.fan_in)
            .map(|j| {
                let w = layer.w(h, j).abs();
                if w > threshold {
                    w
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = col.iter().sum();
        if total == 0.0 {
            continue;
        }
        used += 1;
        for j in 0..layer.fan_in {
            acc[j] += col[j] / total;
        }
    }
    if used == 0 {
        return Err(Error::ThresholdTooHigh(threshold));
    }
    let total: f64 = acc.iter().sum();
    Ok(RelativeImportance { ri: acc.iter().map(|q| 100.0 * q / total).collect(), threshold, hidden_used: used })
}

/// Default threshold: the He-uniform bound of the critic input width.
pub fn default_ri_threshold(critic: &MlpParams) -> f64 {
    crate::neural::he_bound(critic.input_dim())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Arterial,
    Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u32,
    pub waiting_cv: u32,
    pub waiting_total: u32,
    pub phase: usize,
    /// Whether the chosen phase gives green to the arterial.
    pub arterial_green: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arterial_green_prob: Option<f64>,
    pub forced: bool,
}

/// One record per decision of `node`, with waiting vehicles counted on the
/// incoming lanes of the requested direction.
pub fn policy_trace(log: &EventLog, net: &RoadNetwork, node: IntersectionId, direction: Direction) -> Vec<TraceRecord> {
    let phases = net.intersection(node).plan.len();
    let arterial: Vec<bool> = (0..phases).map(|p| net.phase_is_arterial(node, p)).collect();
    let mut out = Vec::new();
    for e in log.iter() {
        if let Event::Decision { t, intersection, phase, forced, ref probs, ref waiting, .. } = *e {
            if intersection != node {
                continue;
            }
            let mut rec = TraceRecord {
                t,
                waiting_cv: 0,
                waiting_total: 0,
                phase,
                arterial_green: arterial.get(phase).copied().unwrap_or(false),
                arterial_green_prob: probs
                    .as_ref()
                    .map(|p| p.iter().zip(&arterial).filter(|(_, a)| **a).map(|(v, _)| *v).sum()),
                forced,
            };
            for w in waiting {
                let is_art = net.lane(w.lane).heading.is_arterial();
                if is_art == (direction == Direction::Arterial) {
                    rec.waiting_cv += w.cv;
                    rec.waiting_total += w.total;
                }
            }
            out.push(rec);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Architecture, MlpParams};

    #[test]
    fn aggregate_examples() {
        let a = mean_std(&[4.0, 6.0]);
        assert_eq!(a.mean, 5.0);
        assert!((a.std - 2f64.sqrt()).abs() < 1e-15);
        let one = mean_std(&[3.0]);
        assert_eq!(one.std, 0.0);
        assert!(one.single_round);
        assert_eq!(mean_std(&[2.0, 2.0, 2.0]).std, 0.0);
    }

    #[test]
    fn ri_examples() {
        let mut p = MlpParams::zeros(&Architecture::new(vec![1, 1]));
        p.layers[0].weights[0] = 0.9;
        assert_eq!(relative_importance(&p, 0.1).unwrap().ri, vec![100.0]);
        let mut p = MlpParams::zeros(&Architecture::new(vec![2, 1]));
        p.layers[0].weights = vec![1.0, 0.5];
        let r = relative_importance(&p, 0.1).unwrap();
        assert!((r.ri[0] - 200.0 / 3.0).abs() < 1e-12);
        assert!((r.ri[1] - 100.0 / 3.0).abs() < 1e-12);
        assert!(matches!(relative_importance(&p, 2.0), Err(Error::ThresholdTooHigh(_))));
    }

    #[test]
    fn empty_log_gives_zero() {
        let net = crate::netmodel::build_grid(&crate::netmodel::GridSpec::new(1, 1)).unwrap();
        let m = m_delay(&EventLog::default(), &net);
        assert_eq!(m.m_delay, 0.0);
        assert_eq!(m.per_intersection, vec![0.0]);
    }
}
