use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cvlight::config::{ControllerSpec, DemandConfig, PatternName};
use cvlight::files::{self, NetworkDocument};
use cvlight::harness::{self, render_report};
use cvlight::{categorize, ControllerKind, ExperimentReport, ScenarioConfig, TrainOptions};
use cvlight_core::netmodel::{build_grid, GridSpec, PhaseTemplate, SignalTiming};

/// Decentralized traffic-signal control under partial connected-vehicle
/// observability.
///
/// Exit codes: 0 success, 2 usage, 3 configuration, 4 runtime, 5 numeric
/// failure (NaN or infinity during training).
#[derive(Parser, Debug)]
#[command(name = "cvlight", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a grid network document (optionally with its demand).
    GenNet(GenNet),
    /// Train the configured agents.
    Train(Train),
    /// Evaluate controllers on test rounds, optionally sweeping penetration.
    Eval(Eval),
    /// Relative importance of critic inputs and policy traces.
    Analyze(Analyze),
    /// Tabulate one or more summary.json files.
    Report(Report),
}

#[derive(Args, Debug)]
struct GenNet {
    #[arg(long, default_value_t = 2)]
    rows: usize,
    #[arg(long, default_value_t = 2)]
    cols: usize,
    /// Lane length in metres.
    #[arg(long, default_value_t = 200.0)]
    lane_length: f64,
    /// Speed limit in m/s.
    #[arg(long, default_value_t = 13.89)]
    speed_limit: f64,
    /// Phase template: two-phase or four-phase.
    #[arg(long, default_value = "two-phase", value_parser = parse_template)]
    template: PhaseTemplate,
    /// One-way arterials alternating direction by row.
    #[arg(long)]
    one_way: bool,
    /// Minimum green in seconds.
    #[arg(long, default_value_t = 7)]
    gmin: u32,
    /// Maximum green in seconds.
    #[arg(long, default_value_t = 40)]
    gmax: u32,
    /// Yellow in seconds.
    #[arg(long, default_value_t = 1)]
    yellow: u32,
    /// All-red clearance in seconds.
    #[arg(long, default_value_t = 2)]
    all_red: u32,
    /// Detection radius in metres.
    #[arg(long, default_value_t = 200.0)]
    radius: f64,
    /// Embed a demand pattern: dynamic-train, dynamic-test, fixed-600, fixed-800.
    #[arg(long, value_parser = parse_pattern)]
    pattern: Option<PatternName>,
    /// CV penetration of the embedded demand.
    #[arg(long, default_value_t = 0.1)]
    penetration: f64,
    #[arg(short, long)]
    out: PathBuf,
}

/// Flags shared by the commands that read a scenario config; each one
/// overrides the matching config field.
#[derive(Args, Debug)]
struct Overrides {
    /// Scenario config (JSON). Without it the built-in 2x2 defaults apply.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Master seed [config default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// CV penetration rate in [0, 1] [config default: 0.1].
    #[arg(long)]
    penetration: Option<f64>,
    /// Minimum green seconds [config default: 7].
    #[arg(long)]
    gmin: Option<u32>,
    /// Maximum green seconds [config default: 40].
    #[arg(long)]
    gmax: Option<u32>,
    /// Round length in seconds [config default: 1800].
    #[arg(long)]
    round_length: Option<u32>,
    /// Grid rows [config default: 2].
    #[arg(long)]
    rows: Option<usize>,
    /// Grid columns [config default: 2].
    #[arg(long)]
    cols: Option<usize>,
    /// Demand pattern: dynamic-train, dynamic-test, fixed-600, fixed-800
    /// [config default: dynamic-train].
    #[arg(long, value_parser = parse_pattern)]
    demand: Option<PatternName>,
    /// Controller for every intersection: cvlight-asym, cvlight-sym,
    /// presslight, dqn, maxpressure, webster, fixed [config default:
    /// cvlight-asym].
    #[arg(long, value_parser = parse_controller)]
    controller: Option<ControllerKind>,
}

impl Overrides {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::load(p)?,
            None => ScenarioConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds.master = s;
        }
        if let Some(p) = self.penetration {
            cfg.cv_penetration = p;
        }
        if let Some(g) = self.gmin {
            cfg.gmin = g;
        }
        if let Some(g) = self.gmax {
            cfg.gmax = g;
        }
        if let Some(r) = self.round_length {
            cfg.round_length = r;
        }
        if let Some(r) = self.rows {
            cfg.network.rows = r;
        }
        if let Some(c) = self.cols {
            cfg.network.cols = c;
        }
        if let Some(d) = self.demand {
            cfg.demand = DemandConfig { pattern: d, ..cfg.demand };
        }
        if let Some(k) = self.controller {
            cfg.controller = ControllerSpec::Uniform(k);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct Train {
    #[command(flatten)]
    o: Overrides,
    /// Updates per agent [config default: 6000].
    #[arg(long)]
    updates: Option<u64>,
    /// Evaluate every this many updates [config default: 1000].
    #[arg(long)]
    eval_every: Option<u64>,
    /// Start from this checkpoint set.
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// Stop at the first evaluation with M_delay at or below this value.
    #[arg(long)]
    target: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    #[command(flatten)]
    o: Overrides,
    /// Checkpoint set for learned controllers.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Test rounds [config default: 96].
    #[arg(long)]
    rounds: Option<usize>,
    /// Comma-separated penetrations to sweep [config default: the scenario rate].
    #[arg(long, value_delimiter = ',')]
    penetrations: Option<Vec<f64>>,
    /// Comma-separated baseline controllers evaluated on the same seeds.
    #[arg(long, value_delimiter = ',', value_parser = parse_controller)]
    baselines: Option<Vec<ControllerKind>>,
    /// Worker threads; 0 lets the pool decide [config default: 0].
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Analyze {
    #[command(flatten)]
    o: Overrides,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Decision-logged JSONL event log; simulated when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Weight threshold [default: sqrt(6 / critic input width)].
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Report {
    /// summary.json files.
    #[arg(required = true)]
    summaries: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_template(s: &str) -> Result<PhaseTemplate, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown template `{s}`"))
}

fn parse_pattern(s: &str) -> Result<PatternName, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown demand pattern `{s}`"))
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    ControllerKind::parse(s).ok_or_else(|| format!("unknown controller `{s}`"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenNet(g) => {
            let net = build_grid(&GridSpec {
                rows: g.rows,
                cols: g.cols,
                lane_length: g.lane_length,
                speed_limit: g.speed_limit,
                template: g.template,
                timing: SignalTiming { min_green: g.gmin, max_green: g.gmax, yellow: g.yellow, all_red: g.all_red },
                one_way_arterials: g.one_way,
                detection_radius: g.radius,
            })?;
            let demand = match g.pattern {
                Some(p) => Some(DemandConfig::pattern(p).build(&net, g.penetration)?),
                None => None,
            };
            files::write_network(&NetworkDocument::new(net, demand), &g.out)?;
            println!("wrote {}", g.out.display());
        }
        Command::Train(t) => {
            let mut cfg = t.o.load()?;
            if let Some(u) = t.updates {
                cfg.training.updates = u;
            }
            if let Some(e) = t.eval_every {
                cfg.training.eval_every = e;
            }
            if let Some(p) = t.pretrain {
                cfg.training.pretrain = Some(std::path::absolute(&p).context("resolving pretrain path")?);
            }
            cfg.validate()?;
            let r = cvlight::run_training(&cfg, &t.out, &TrainOptions { target_m_delay: t.target })?;
            if let Some(tr) = &r.training {
                for p in &tr.evaluations {
                    println!("update {:>6}  eval M_delay {:.4}", p.update, p.m_delay);
                }
                println!("best {:.4} at update {}", tr.best_m_delay, tr.best_update);
            }
        }
        Command::Eval(e) => {
            let mut cfg = e.o.load()?;
            if let Some(r) = e.rounds {
                cfg.evaluation.rounds = r;
            }
            if let Some(p) = e.penetrations {
                cfg.evaluation.penetrations = p;
            }
            if let Some(b) = e.baselines {
                cfg.evaluation.baselines = b;
            }
            if let Some(w) = e.workers {
                cfg.evaluation.workers = w;
            }
            cfg.validate()?;
            let r = cvlight::run_evaluation(&cfg, e.checkpoint.as_deref(), &e.out)?;
            print!("{}", render_report(&[(e.out.join(harness::SUMMARY_JSON), r)]));
        }
        Command::Analyze(a) => {
            let cfg = a.o.load()?;
            let r = cvlight::run_analysis(&cfg, &a.checkpoint, a.log.as_deref(), a.threshold, &a.out)?;
            if let Some(an) = &r.analysis {
                for g in &an.groups {
                    println!("intersection {} {:<15} {:>7.3}%", g.intersection, g.group, g.ri_percent);
                }
                if !an.noncv_absent.is_empty() {
                    println!("note: no non-CV inputs at intersections {:?} (symmetric critic)", an.noncv_absent);
                }
            }
        }
        Command::Report(r) => {
            let reports =
                r.summaries.iter().map(|p| Ok((p.clone(), ExperimentReport::load(p)?))).collect::<Result<Vec<_>>>()?;
            let table = render_report(&reports);
            print!("{table}");
            if let Some(out) = r.out {
                std::fs::write(&out, table).with_context(|| format!("writing {}", out.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(categorize(&e).exit_code() as u8)
        }
    }
}
