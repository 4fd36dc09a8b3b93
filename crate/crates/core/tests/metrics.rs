use std::collections::HashMap;

use cvlight_core::agents::{
    webster_plan, webster_update, ControllerDecision, FixedTime, WebsterParams, WebsterPlanState,
};
use cvlight_core::metrics::*;
use cvlight_core::netmodel::*;
use cvlight_core::neural::{Architecture, MlpParams};
use cvlight_core::rng;
use cvlight_core::simcore::*;
use cvlight_core::Result;
use proptest::prelude::*;
use rand::Rng;

struct RandomController(rng::StreamRng);

impl Controller for RandomController {
    fn decide(&mut self, ctx: &DecisionContext<'_, '_>) -> Result<ControllerDecision> {
        let n = ctx.net().intersection(ctx.intersection).plan.len();
        let cur = ctx.signal().phase;
        let mut phase = self.0.gen_range(0..n);
        if ctx.forced && phase == cur {
            phase = (cur + 1) % n;
        }
        let probs = vec![1.0 / n as f64; n];
        Ok(ControllerDecision::new(ctx.intersection, phase, ctx.sim.clock).with_probs(probs))
    }
}

/// Replays vehicle enter/exit records and recomputes the delay metric
/// without looking at the lane snapshots.
fn replay_m_delay(log: &EventLog, net: &RoadNetwork, horizon: u32) -> f64 {
    // (lane, entered, left) stays per vehicle visit.
    let mut open: HashMap<usize, (LaneId, u32)> = HashMap::new();
    let mut stays: Vec<(LaneId, u32, u32)> = vec![];
    for e in log.iter() {
        match *e {
            Event::LaneEnter { t, vehicle, lane, .. } => {
                open.insert(vehicle.0, (lane, t));
            }
            Event::LaneExit { t, vehicle, lane } => {
                let (l, t0) = open.remove(&vehicle.0).expect("exit without enter");
                assert_eq!(l, lane);
                stays.push((l, t0, t));
            }
            _ => {}
        }
    }
    for (_, (l, t0)) in open {
        stays.push((l, t0, u32::MAX));
    }
    let k = net.intersections.len();
    let mut per = vec![0.0; k];
    for (i, node) in net.intersections.iter().enumerate() {
        let (mut sum, mut steps) = (0.0, 0u32);
        for t in 0..horizon {
            let (mut d, mut n) = (0.0, 0u32);
            for &(l, t0, t1) in &stays {
                if t0 <= t && t < t1 && node.incoming.contains(&l) {
                    let lane = net.lane(l);
                    d += (t as f64 - t0 as f64 - lane.length / lane.speed_limit).max(0.0);
                    n += 1;
                }
            }
            if n > 0 {
                sum += d / n as f64;
                steps += 1;
            }
        }
        per[i] = if steps > 0 { sum / steps as f64 } else { 0.0 };
    }
    per.iter().sum::<f64>() / k as f64
}

#[test]
fn m_delay_matches_event_replay() {
    let mut r = rng::from_seed(99);
    for round in 0..100u64 {
        let mut spec = GridSpec::new(1, 1);
        spec.lane_length = [100.0, 150.0, 200.0][round as usize % 3];
        let net = build_grid(&spec).unwrap();
        let rate = r.gen_range(200.0..1500.0);
        let demand = DemandSpec::uniform(&net, rate, TurnProportions::default(), r.gen_range(0.0..1.0));
        let mut c = RandomController(rng::from_seed(round + 7));
        let mut refs: Vec<&mut dyn Controller> = vec![&mut c];
        let log = run_round(&net, &demand, &mut refs, round, 120, LogConfig::ALL).unwrap();
        let got = m_delay(&log, &net).m_delay;
        let want = replay_m_delay(&log, &net, 120);
        assert!((got - want).abs() <= 1e-9, "round {round}: {got} vs {want}");
    }
}

#[test]
fn hand_replay_of_three_snapshots() {
    let net = build_grid(&GridSpec::new(1, 1)).unwrap();
    let a = net.intersections[0].incoming[0];
    let b = net.intersections[0].incoming[3];
    let mut log = EventLog::default();
    log.events.push(Event::LaneSnapshot { t: 0, lane: a, n: 2, n_cv: 1, delay_sum: 4.0 });
    log.events.push(Event::LaneSnapshot { t: 0, lane: b, n: 2, n_cv: 0, delay_sum: 2.0 });
    log.events.push(Event::LaneSnapshot { t: 3, lane: a, n: 1, n_cv: 0, delay_sum: 0.5 });
    // (6 / 4 + 0.5 / 1) / 2 snapshot times.
    assert_eq!(m_delay(&log, &net).m_delay, 1.0);
}

#[test]
fn lone_free_flow_vehicle_has_no_delay() {
    let net = build_grid(&GridSpec::new(1, 1)).unwrap();
    let demand = DemandSpec::uniform(&net, 0.0, TurnProportions::default(), 0.0);
    let mut sim = Simulation::new(&net, &demand, 0);
    // An empty round: nothing on the lanes at any time.
    let mut c = FixedTime::new(vec![30, 30]);
    let mut refs: Vec<&mut dyn Controller> = vec![&mut c];
    for _ in 0..300 {
        sim.step(&mut refs).unwrap();
    }
    let log = sim.into_log();
    assert_eq!(m_delay(&log, &net).m_delay, 0.0);
    // Light traffic through a long green phase never waits.
    let demand = DemandSpec::arterial_side(
        &net,
        &[40.0],
        &[0.0],
        600,
        TurnProportions { through: 1.0, left: 0.0, right: 0.0 },
        0.0,
    );
    let arterial = (0..2).find(|&p| net.phase_is_arterial(IntersectionId(0), p)).unwrap();
    let mut greens = vec![7, 7];
    greens[arterial] = 600;
    let mut c = FixedTime::new(greens);
    let mut refs: Vec<&mut dyn Controller> = vec![&mut c];
    let log = run_round(&net, &demand, &mut refs, 5, 400, LogConfig::ALL).unwrap();
    assert!(m_delay(&log, &net).m_delay < 1.0);
}

#[test]
fn traces_have_one_record_per_decision() {
    let net = build_grid(&GridSpec::new(2, 2)).unwrap();
    let demand = DemandPattern::DynamicTrain.demand(&net, TurnProportions::default(), 0.3);
    let mut cs: Vec<RandomController> = (0..4).map(|i| RandomController(rng::from_seed(i))).collect();
    let mut refs: Vec<&mut dyn Controller> = cs.iter_mut().map(|c| c as &mut dyn Controller).collect();
    let log = run_round(&net, &demand, &mut refs, 3, 900, LogConfig::ALL).unwrap();
    for i in 0..4 {
        let node = IntersectionId(i);
        let decisions: Vec<&Event> =
            log.iter().filter(|e| matches!(e, Event::Decision { intersection, .. } if *intersection == node)).collect();
        let art = policy_trace(&log, &net, node, Direction::Arterial);
        let side = policy_trace(&log, &net, node, Direction::Side);
        assert_eq!(art.len(), decisions.len());
        assert_eq!(side.len(), decisions.len());
        for ((a, s), e) in art.iter().zip(&side).zip(decisions) {
            let Event::Decision { t, phase, waiting, .. } = e else { unreachable!() };
            assert_eq!((a.t, a.phase), (*t, *phase));
            let total: u32 = waiting.iter().map(|w| w.total).sum();
            let cv: u32 = waiting.iter().map(|w| w.cv).sum();
            assert_eq!(a.waiting_total + s.waiting_total, total);
            assert_eq!(a.waiting_cv + s.waiting_cv, cv);
            assert!(a.waiting_cv <= a.waiting_total);
            assert_eq!(a.arterial_green_prob, Some(0.5));
        }
    }
}

#[test]
fn fixed_time_traces_carry_no_probabilities() {
    let net = build_grid(&GridSpec::new(1, 1)).unwrap();
    let demand = DemandPattern::Fixed600.demand(&net, TurnProportions::default(), 0.1);
    let mut c = FixedTime::new(vec![30, 30]);
    let mut refs: Vec<&mut dyn Controller> = vec![&mut c];
    let log = run_round(&net, &demand, &mut refs, 1, 600, LogConfig::ALL).unwrap();
    let tr = policy_trace(&log, &net, IntersectionId(0), Direction::Arterial);
    assert!(!tr.is_empty());
    assert!(tr.iter().all(|r| r.arterial_green_prob.is_none()));
}

#[test]
fn webster_hand_example() {
    let p = WebsterParams::default();
    let plan = webster_plan(&[0.3, 0.2], 6.0, &p);
    // (1.5 * 6 + 5) / (1 - 0.5) = 28, raised to the 30 s floor.
    assert_eq!(plan.cycle, 30.0);
    assert!((plan.splits[0] - 14.4).abs() < 1e-12 && (plan.splits[1] - 9.6).abs() < 1e-12);
    let plan = webster_plan(&[0.4, 0.3], 6.0, &p);
    assert!((plan.cycle - 14.0 / 0.3).abs() < 1e-12);
    assert_eq!(webster_plan(&[0.6, 0.5], 6.0, &p).cycle, 120.0);
    let prev = WebsterPlanState::initial(2, 6.0, &p);
    assert_eq!(webster_update(&prev, &[0, 0], &[vec![0], vec![1]], 300.0, &p), prev);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn webster_splits_fill_the_effective_green(
        y in prop::collection::vec(0.0f64..0.6, 1..5),
        lost in 0.0f64..20.0,
    ) {
        let plan = webster_plan(&y, lost, &WebsterParams::default());
        let s: f64 = plan.splits.iter().sum();
        prop_assert!((s - (plan.cycle - lost)).abs() < 1e-9);
        prop_assert!(plan.splits.iter().all(|&g| g >= 0.0));
    }

    #[test]
    fn relative_importance_permutes_and_scales(
        fan_in in 2usize..8,
        fan_out in 1usize..6,
        seed in any::<u64>(),
        scale in 0.1f64..10.0,
    ) {
        let mut r = rng::from_seed(seed);
        let mut p = MlpParams::zeros(&Architecture::new(vec![fan_in, fan_out, 2]));
        for w in &mut p.layers[0].weights {
            *w = r.gen_range(-1.0..1.0);
        }
        let thr = 0.2;
        let Ok(base) = relative_importance(&p, thr) else { return Ok(()); };
        prop_assert!((base.ri.iter().sum::<f64>() - 100.0).abs() < 1e-9);

        // Reverse the input order.
        let mut q = p.clone();
        for h in 0..fan_out {
            for j in 0..fan_in {
                q.layers[0].weights[h * fan_in + j] = p.layers[0].weights[h * fan_in + (fan_in - 1 - j)];
            }
        }
        let perm = relative_importance(&q, thr).unwrap();
        for j in 0..fan_in {
            prop_assert!((perm.ri[j] - base.ri[fan_in - 1 - j]).abs() < 1e-9);
        }

        // Scaling weights and threshold together changes nothing.
        let mut s = p.clone();
        s.layers[0].weights.iter_mut().for_each(|w| *w *= scale);
        let scaled = relative_importance(&s, thr * scale).unwrap();
        for j in 0..fan_in {
            prop_assert!((scaled.ri[j] - base.ri[j]).abs() < 1e-9);
        }
    }
}
