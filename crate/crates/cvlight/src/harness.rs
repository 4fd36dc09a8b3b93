//! Training, evaluation and analysis runs driven by a [`ScenarioConfig`].
//!
//! Every output file is a pure function of the config and its seeds: rounds
//! are evaluated in parallel but collected in seed order, and no timestamps
//! or absolute paths are written.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cvlight_core::agents::{FixedTime, MaxPressure, Webster};
use cvlight_core::metrics::{
    aggregate_rounds, default_ri_threshold, m_delay, policy_trace, relative_importance, Aggregate, Direction,
    RoundMetrics,
};
use cvlight_core::netmodel::{DemandSpec, IntersectionId, RoadNetwork};
use cvlight_core::rng::derive_seed;
use cvlight_core::sensing::Feature;
use cvlight_core::simcore::{run_round, Controller, EventLog, LogConfig};
use cvlight_core::train::{
    train_loop, AgentBundle, AgentKind, Flow, PolicyController, TrainRecord, TrainScenario, TrainSchedule,
};

use crate::config::{ConfigError, ControllerKind, ControllerSpec, ScenarioConfig};
use crate::files::{self, CheckpointSet, JsonlWriter};

pub const TRAINING_LOG: &str = "training_log.jsonl";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const RI_CSV: &str = "relative_importance.csv";
pub const RI_GROUPS_CSV: &str = "ri_groups.csv";
pub const TRACE_CSV: &str = "policy_trace.csv";
pub const DECISION_LOG: &str = "decision_log.jsonl";
pub const FAILURE_JSON: &str = "failure.json";

/// A config with its network built and controllers resolved.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: ScenarioConfig,
    pub net: RoadNetwork,
    pub kinds: Vec<ControllerKind>,
}

impl Scenario {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let net = cfg.build_network()?;
        let kinds = cfg.controller.resolve(net.intersections.len());
        Ok(Scenario { cfg, net, kinds })
    }

    pub fn all_learned(&self) -> bool {
        self.kinds.iter().all(|k| k.is_learned())
    }

    pub fn any_learned(&self) -> bool {
        self.kinds.iter().any(|k| k.is_learned())
    }

    /// Fresh agents for the learned intersections, or agents loaded from
    /// `from` when given. Non-learned intersections get `None`.
    pub fn agents(&self, from: Option<&CheckpointSet>) -> Result<Vec<Option<AgentBundle>>> {
        let n = self.net.intersections.len();
        let hp = self.cfg.training.hyperparams;
        let mut out = Vec::with_capacity(n);
        for (i, kind) in self.kinds.iter().enumerate() {
            let Some(ak) = kind.agent_kind() else {
                out.push(None);
                continue;
            };
            let node = IntersectionId(i);
            let layout = ak.layout(&self.net, node);
            let agent = match from {
                None => AgentBundle::for_intersection(ak, &self.net, node, hp, self.cfg.seeds.init()),
                Some(set) => {
                    let ck = set.for_intersection(i, n, self.cfg.training.pretrain_agent)?;
                    if ck.kind != ak {
                        bail!(ConfigError::new(format!(
                            "intersection {i}: checkpoint holds a {} agent but the config asks for {}",
                            ck.kind.name(),
                            ak.name()
                        )));
                    }
                    AgentBundle::from_checkpoint(ck, &layout).with_context(|| format!("intersection {i}"))?
                }
            };
            out.push(Some(agent));
        }
        Ok(out)
    }

    fn baseline(&self, kind: ControllerKind, node: usize) -> Box<dyn Controller + '_> {
        match kind {
            ControllerKind::Fixed => Box::new(FixedTime::new(self.cfg.fixed_greens.clone())),
            ControllerKind::Maxpressure => Box::new(MaxPressure::new(self.cfg.maxpressure_visibility)),
            ControllerKind::Webster => Box::new(Webster::new(&self.net, IntersectionId(node), self.cfg.webster)),
            k => unreachable!("{k} is learned"),
        }
    }

    /// Controllers for one round; learned kinds act greedily.
    pub fn controllers<'a>(
        &'a self,
        kinds: &[ControllerKind],
        agents: &'a [Option<AgentBundle>],
    ) -> Result<Vec<Box<dyn Controller + 'a>>> {
        kinds
            .iter()
            .enumerate()
            .map(|(i, k)| -> Result<Box<dyn Controller + 'a>> {
                if k.is_learned() {
                    let agent = agents
                        .get(i)
                        .and_then(Option::as_ref)
                        .with_context(|| format!("intersection {i} uses {k} but no trained agent was supplied"))?;
                    Ok(Box::new(PolicyController { agent }))
                } else {
                    Ok(self.baseline(*k, i))
                }
            })
            .collect()
    }

    /// One round with the given controllers and seed.
    pub fn round(
        &self,
        kinds: &[ControllerKind],
        agents: &[Option<AgentBundle>],
        demand: &DemandSpec,
        seed: u64,
        log_cfg: LogConfig,
    ) -> Result<EventLog> {
        let mut ctls = self.controllers(kinds, agents)?;
        let mut refs: Vec<&mut dyn Controller> = ctls.iter_mut().map(|c| &mut **c as &mut dyn Controller).collect();
        Ok(run_round(&self.net, demand, &mut refs, seed, self.cfg.round_length, log_cfg)?)
    }

    /// Test rounds `0..rounds` with seeds `derive_seed(seeds.test(), k)`.
    pub fn test_rounds(
        &self,
        kinds: &[ControllerKind],
        agents: &[Option<AgentBundle>],
        demand: &DemandSpec,
        rounds: usize,
    ) -> Result<Vec<RoundMetrics>> {
        let base = self.cfg.seeds.test();
        let run = || {
            (0..rounds)
                .into_par_iter()
                .map(|k| {
                    let seed = derive_seed(base, k as u64);
                    let log = self.round(kinds, agents, demand, seed, LogConfig::METRICS)?;
                    Ok(m_delay(&log, &self.net).with_seed(seed))
                })
                .collect::<Result<Vec<_>>>()
        };
        match self.cfg.evaluation.workers {
            0 => run(),
            w => rayon::ThreadPoolBuilder::new().num_threads(w).build()?.install(run),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerResult {
    pub controller: String,
    pub penetration: f64,
    pub m_delay: Aggregate,
    pub mean_throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub update: u64,
    pub m_delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub updates: u64,
    pub evaluations: Vec<EvalPoint>,
    pub best_update: u64,
    pub best_m_delay: f64,
    /// Set when training stopped at the configured target delay.
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShare {
    pub intersection: usize,
    pub group: String,
    pub ri_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub threshold: f64,
    pub groups: Vec<GroupShare>,
    /// Intersections whose critic sees no non-CV inputs.
    pub noncv_absent: Vec<usize>,
    pub trace_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_fingerprint: String,
    pub master_seed: u64,
    /// Results at the scenario penetration rate.
    pub per_controller: Vec<ControllerResult>,
    /// Results for every swept penetration rate.
    pub sweep: Vec<ControllerResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisSummary>,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl ExperimentReport {
    fn new(cfg: &ScenarioConfig) -> Self {
        ExperimentReport {
            name: cfg.name.clone(),
            config_fingerprint: cfg.fingerprint(),
            master_seed: cfg.seeds.master,
            per_controller: vec![],
            sweep: vec![],
            training: None,
            analysis: None,
            artifacts: vec![],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
    }

    /// Result for `controller` at the scenario penetration.
    pub fn result(&self, controller: &str) -> Option<&ControllerResult> {
        self.per_controller.iter().find(|r| r.controller == controller)
    }
}

fn prepare_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Options for [`run_training`] beyond the config.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop at the first evaluation at or below this delay.
    pub target_m_delay: Option<f64>,
}

/// Trains the configured agents, writing the training log, the best and
/// final checkpoint sets and `summary.json` into `out`.
pub fn run_training(cfg: &ScenarioConfig, out: &Path, opts: &TrainOptions) -> Result<ExperimentReport> {
    let sc = Scenario::new(cfg.clone())?;
    if !sc.all_learned() {
        bail!(ConfigError::new("training needs a learned controller at every intersection"));
    }
    prepare_dir(out)?;
    let pretrain = match &cfg.training.pretrain {
        Some(p) => Some(CheckpointSet::load(&cfg.resolve_path(p))?),
        None => None,
    };
    let mut agents: Vec<AgentBundle> = sc.agents(pretrain.as_ref())?.into_iter().flatten().collect();
    let train_demand = cfg.train_demand(&sc.net)?;
    let eval_demand = cfg.test_demand(&sc.net, cfg.cv_penetration)?;
    let scn = TrainScenario {
        net: &sc.net,
        train_demand: &train_demand,
        eval_demand: &eval_demand,
        round_length: cfg.round_length,
        seed: cfg.seeds.training(),
        eval_seed: cfg.seeds.training_eval(),
    };
    let sched = TrainSchedule {
        updates: cfg.training.updates,
        eval_every: cfg.training.eval_every,
        eval_rounds: cfg.training.eval_rounds,
        max_rounds: cfg.training.max_rounds,
    };

    let mut log = JsonlWriter::create(&out.join(TRAINING_LOG))?;
    let mut best: Option<(u64, f64)> = None;
    let mut points = Vec::new();
    let mut last: Option<TrainRecord> = None;
    let mut stopped = false;
    let best_path = out.join(BEST_CHECKPOINT);
    let result = train_loop(&scn, &mut agents, &sched, &mut |rec, agents| {
        let io = (|| -> Result<()> {
            log.write(rec)?;
            log.flush()?;
            let d = rec.eval_m_delay.unwrap_or(f64::INFINITY);
            points.push(EvalPoint { update: rec.update, m_delay: d });
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((rec.update, d));
                CheckpointSet::from_agents(agents, rec.update, Some(d)).save(&best_path)?;
            }
            Ok(())
        })();
        last = Some(rec.clone());
        io.map_err(|e| cvlight_core::Error::Config(format!("writing training outputs: {e:#}")))?;
        if opts.target_m_delay.is_some_and(|t| rec.eval_m_delay.is_some_and(|d| d <= t)) {
            stopped = true;
            return Ok(Flow::Stop);
        }
        Ok(Flow::Continue)
    });
    if let Err(e) = result {
        let dump = serde_json::json!({ "error": e.to_string(), "last_record": last });
        fs::write(out.join(FAILURE_JSON), serde_json::to_string_pretty(&dump)?)?;
        return Err(anyhow::Error::new(e)
            .context(format!("training failed; diagnostics in {}", out.join(FAILURE_JSON).display())));
    }
    let final_update = agents.iter().map(|a| a.updates).min().unwrap_or(0);
    CheckpointSet::from_agents(&agents, final_update, points.last().map(|p| p.m_delay))
        .save(&out.join(FINAL_CHECKPOINT))?;

    let (best_update, best_m_delay) = best.unwrap_or((0, f64::NAN));
    let mut report = ExperimentReport::new(cfg);
    report.training = Some(TrainingSummary {
        updates: final_update,
        evaluations: points,
        best_update,
        best_m_delay,
        stopped_early: stopped,
    });
    report.artifacts = vec![TRAINING_LOG.into(), BEST_CHECKPOINT.into(), FINAL_CHECKPOINT.into(), SUMMARY_JSON.into()];
    report.save(&out.join(SUMMARY_JSON))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RoundRow {
    controller: String,
    penetration: f64,
    round: usize,
    seed: u64,
    m_delay: f64,
    throughput: u64,
    spawned: u64,
    deferred: u64,
}

/// Evaluates the configured controllers (and any baselines) for every swept
/// penetration on the same seeds. Learned controllers need `checkpoint`.
pub fn run_evaluation(cfg: &ScenarioConfig, checkpoint: Option<&Path>, out: &Path) -> Result<ExperimentReport> {
    let sc = Scenario::new(cfg.clone())?;
    prepare_dir(out)?;
    let agents = match checkpoint {
        Some(p) => sc.agents(Some(&CheckpointSet::load(p)?))?,
        None if sc.any_learned() => {
            bail!(ConfigError::new("learned controllers need a checkpoint to evaluate"))
        }
        None => vec![None; sc.net.intersections.len()],
    };
    let n = sc.net.intersections.len();
    let mut entries: Vec<(String, Vec<ControllerKind>)> = vec![(cfg.controller.label(), sc.kinds.clone())];
    for b in &cfg.evaluation.baselines {
        let label = ControllerSpec::Uniform(*b).label();
        if b.is_learned() {
            bail!(ConfigError::new(format!("baseline {b} is a learned controller; list it under `controller`")));
        }
        if !entries.iter().any(|(l, _)| *l == label) {
            entries.push((label, vec![*b; n]));
        }
    }

    let mut rows = Vec::new();
    let mut report = ExperimentReport::new(cfg);
    for &p in &cfg.sweep() {
        let demand = cfg.test_demand(&sc.net, p)?;
        for (label, kinds) in &entries {
            let rounds = sc.test_rounds(kinds, &agents, &demand, cfg.evaluation.rounds)?;
            for (k, r) in rounds.iter().enumerate() {
                rows.push(RoundRow {
                    controller: label.clone(),
                    penetration: p,
                    round: k,
                    seed: r.seed,
                    m_delay: r.m_delay,
                    throughput: r.throughput,
                    spawned: r.spawned,
                    deferred: r.deferred,
                });
            }
            let res = ControllerResult {
                controller: label.clone(),
                penetration: p,
                m_delay: aggregate_rounds(&rounds),
                mean_throughput: rounds.iter().map(|r| r.throughput as f64).sum::<f64>() / rounds.len() as f64,
            };
            report.sweep.push(res);
        }
    }
    let base = if cfg.sweep().contains(&cfg.cv_penetration) { cfg.cv_penetration } else { cfg.sweep()[0] };
    report.per_controller = report.sweep.iter().filter(|r| r.penetration == base).cloned().collect();

    let mut w = csv::Writer::from_path(out.join(ROUNDS_CSV))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    report.artifacts = vec![ROUNDS_CSV.into(), SUMMARY_JSON.into()];
    report.save(&out.join(SUMMARY_JSON))?;
    Ok(report)
}

/// Coarse grouping of a critic input.
pub fn feature_group(f: &Feature) -> &'static str {
    match *f {
        Feature::Phase { .. } => "phase",
        Feature::Duration => "duration",
        Feature::Segment { cv: true, .. } => "cv-count",
        Feature::Segment { cv: false, .. } => "noncv-count",
        Feature::Outgoing { cv: true, .. } => "cv-outgoing",
        Feature::Outgoing { cv: false, .. } => "noncv-outgoing",
        Feature::Delay { cv: true, .. } => "cv-delay",
        Feature::Delay { cv: false, .. } => "noncv-delay",
    }
}

fn feature_label(f: &Feature) -> String {
    match *f {
        Feature::Phase { phase } => format!("phase[{phase}]"),
        Feature::Duration => "duration".into(),
        Feature::Segment { lane, segment, cv } => {
            format!("{}segment[{lane}][{segment}]", if cv { "cv_" } else { "noncv_" })
        }
        Feature::Outgoing { lane, cv } => format!("{}outgoing[{lane}]", if cv { "cv_" } else { "noncv_" }),
        Feature::Delay { lane, cv } => format!("{}delay[{lane}]", if cv { "cv_" } else { "noncv_" }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct RiRow {
    intersection: usize,
    input: usize,
    feature: String,
    group: &'static str,
    ri_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TraceRow {
    intersection: usize,
    direction: Direction,
    t: u32,
    waiting_cv: u32,
    waiting_total: u32,
    phase: usize,
    arterial_green: bool,
    arterial_green_prob: Option<f64>,
    forced: bool,
}

/// Per-group RI shares of one agent's critic.
pub fn ri_groups(agent: &AgentBundle, threshold: Option<f64>) -> Result<Vec<(String, f64)>> {
    let thr = threshold.unwrap_or_else(|| default_ri_threshold(&agent.critic));
    let ri = relative_importance(&agent.critic, thr)?;
    let feats = agent.layout.features();
    let mut groups: Vec<(String, f64)> = Vec::new();
    for (j, v) in ri.ri.iter().enumerate() {
        let g = feature_group(&feats[j]);
        match groups.iter_mut().find(|(n, _)| n == g) {
            Some(e) => e.1 += v,
            None => groups.push((g.to_string(), *v)),
        }
    }
    Ok(groups)
}

/// Relative importance of every learned critic plus policy traces from a
/// decision-logged round. When `log` is `None` one round (test seed 0) is
/// simulated and saved alongside.
pub fn run_analysis(
    cfg: &ScenarioConfig,
    checkpoint: &Path,
    log: Option<&Path>,
    threshold: Option<f64>,
    out: &Path,
) -> Result<ExperimentReport> {
    let sc = Scenario::new(cfg.clone())?;
    if !sc.any_learned() {
        bail!(ConfigError::new("analysis needs at least one learned controller"));
    }
    prepare_dir(out)?;
    let agents = sc.agents(Some(&CheckpointSet::load(checkpoint)?))?;
    let mut report = ExperimentReport::new(cfg);
    let mut artifacts: Vec<String> = Vec::new();

    let mut ri_rows = Vec::new();
    let mut groups = Vec::new();
    let mut noncv_absent = Vec::new();
    let mut thr_used = f64::NAN;
    for (i, a) in agents.iter().enumerate() {
        let Some(a) = a else { continue };
        let thr = threshold.unwrap_or_else(|| default_ri_threshold(&a.critic));
        thr_used = thr;
        let ri = relative_importance(&a.critic, thr).with_context(|| format!("intersection {i}"))?;
        let feats = a.layout.features();
        if a.kind != AgentKind::CvlightAsym {
            noncv_absent.push(i);
        }
        for (j, v) in ri.ri.iter().enumerate() {
            ri_rows.push(RiRow {
                intersection: i,
                input: j,
                feature: feature_label(&feats[j]),
                group: feature_group(&feats[j]),
                ri_percent: *v,
            });
        }
        for (g, v) in ri_groups(a, Some(thr))? {
            groups.push(GroupShare { intersection: i, group: g, ri_percent: v });
        }
    }
    let mut w = csv::Writer::from_path(out.join(RI_CSV))?;
    for r in &ri_rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join(RI_GROUPS_CSV))?;
    for g in &groups {
        w.serialize(g)?;
    }
    w.flush()?;
    artifacts.extend([RI_CSV.to_string(), RI_GROUPS_CSV.to_string()]);

    let events = match log {
        Some(p) => files::load_events(p)?,
        None => {
            let demand = cfg.test_demand(&sc.net, cfg.cv_penetration)?;
            let log = sc.round(&sc.kinds, &agents, &demand, derive_seed(cfg.seeds.test(), 0), LogConfig::ALL)?;
            files::save_events(&log, &out.join(DECISION_LOG))?;
            artifacts.push(DECISION_LOG.into());
            log
        }
    };
    let mut w = csv::Writer::from_path(out.join(TRACE_CSV))?;
    let mut trace_rows = 0;
    for i in 0..sc.net.intersections.len() {
        for dir in [Direction::Arterial, Direction::Side] {
            for rec in policy_trace(&events, &sc.net, IntersectionId(i), dir) {
                w.serialize(TraceRow {
                    intersection: i,
                    direction: dir,
                    t: rec.t,
                    waiting_cv: rec.waiting_cv,
                    waiting_total: rec.waiting_total,
                    phase: rec.phase,
                    arterial_green: rec.arterial_green,
                    arterial_green_prob: rec.arterial_green_prob,
                    forced: rec.forced,
                })?;
                trace_rows += 1;
            }
        }
    }
    w.flush()?;
    artifacts.push(TRACE_CSV.into());
    artifacts.push(SUMMARY_JSON.into());

    report.analysis = Some(AnalysisSummary { threshold: thr_used, groups, noncv_absent, trace_rows });
    report.artifacts = artifacts;
    report.save(&out.join(SUMMARY_JSON))?;
    Ok(report)
}

/// Markdown table of the sweep results of several summaries.
pub fn render_report(reports: &[(PathBuf, ExperimentReport)]) -> String {
    let mut s = String::from(
        "| summary | controller | penetration | mean M_delay | std | rounds |\n|---|---|---|---|---|---|\n",
    );
    for (path, r) in reports {
        for row in &r.sweep {
            s.push_str(&format!(
                "| {} | {} | {:.2} | {:.4} | {:.4} | {} |\n",
                path.display(),
                row.controller,
                row.penetration,
                row.m_delay.mean,
                row.m_delay.std,
                row.m_delay.rounds
            ));
        }
        if let Some(t) = &r.training {
            s.push_str(&format!(
                "| {} | training | - | best {:.4} at update {} | - | {} evals |\n",
                path.display(),
                t.best_m_delay,
                t.best_update,
                t.evaluations.len()
            ));
        }
    }
    s
}
