//! Scenario configuration files.
//!
//! A config is a JSON object; everything except `network` has a default.
//! Parse errors and validation failures are reported as
//! `path:line:column: message`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cvlight_core::agents::WebsterParams;
use cvlight_core::netmodel::{
    build_grid, DemandPattern, DemandSpec, GridSpec, PhaseTemplate, RoadNetwork, SignalTiming, TurnProportions,
    DEFAULT_DETECTION_RADIUS, DEFAULT_LANE_LENGTH, DEFAULT_SPEED_LIMIT, DYNAMIC_STAGE_SECONDS,
};
use cvlight_core::rng::derive_seed;
use cvlight_core::sensing::Subset;
use cvlight_core::train::{AgentKind, Hyperparams};

use crate::files;

pub const DEFAULT_ROUND_LENGTH: u32 = 1800;
pub const DEFAULT_TEST_ROUNDS: usize = 96;
pub const DEFAULT_PENETRATION: f64 = 0.1;

/// A configuration problem, optionally anchored to a place in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub file: Option<PathBuf>,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        ConfigError { file: None, line: None, column: None, message: message.into() }
    }

    fn at(mut self, file: Option<&Path>, pos: Option<(usize, usize)>) -> Self {
        self.file = file.map(Path::to_path_buf);
        if let Some((l, c)) = pos {
            self.line = Some(l);
            self.column = Some(c);
        }
        self
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.file {
            write!(f, "{}:", p.display())?;
        }
        if let (Some(l), Some(c)) = (self.line, self.column) {
            write!(f, "{l}:{c}:")?;
        }
        if self.file.is_some() || self.line.is_some() {
            write!(f, " ")?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    CvlightAsym,
    CvlightSym,
    Presslight,
    Dqn,
    Maxpressure,
    Webster,
    Fixed,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 7] = [
        ControllerKind::CvlightAsym,
        ControllerKind::CvlightSym,
        ControllerKind::Presslight,
        ControllerKind::Dqn,
        ControllerKind::Maxpressure,
        ControllerKind::Webster,
        ControllerKind::Fixed,
    ];

    pub fn agent_kind(self) -> Option<AgentKind> {
        match self {
            ControllerKind::CvlightAsym => Some(AgentKind::CvlightAsym),
            ControllerKind::CvlightSym => Some(AgentKind::CvlightSym),
            ControllerKind::Presslight => Some(AgentKind::Presslight),
            ControllerKind::Dqn => Some(AgentKind::Dqn),
            _ => None,
        }
    }

    pub fn is_learned(self) -> bool {
        self.agent_kind().is_some()
    }

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::CvlightAsym => "cvlight-asym",
            ControllerKind::CvlightSym => "cvlight-sym",
            ControllerKind::Presslight => "presslight",
            ControllerKind::Dqn => "dqn",
            ControllerKind::Maxpressure => "maxpressure",
            ControllerKind::Webster => "webster",
            ControllerKind::Fixed => "fixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ControllerKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One kind for every intersection, or one per intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControllerSpec {
    Uniform(ControllerKind),
    PerIntersection(Vec<ControllerKind>),
}

impl Default for ControllerSpec {
    fn default() -> Self {
        ControllerSpec::Uniform(ControllerKind::CvlightAsym)
    }
}

impl ControllerSpec {
    pub fn resolve(&self, intersections: usize) -> Vec<ControllerKind> {
        match self {
            ControllerSpec::Uniform(k) => vec![*k; intersections],
            ControllerSpec::PerIntersection(v) => v.clone(),
        }
    }

    /// Short label for reports: the kind, or the kinds joined with `+`.
    pub fn label(&self) -> String {
        match self {
            ControllerSpec::Uniform(k) => k.name().to_string(),
            ControllerSpec::PerIntersection(v) => v.iter().map(|k| k.name()).collect::<Vec<_>>().join("+"),
        }
    }
}

/// Either a generated grid or a network document on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Network document; relative paths resolve against the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    pub rows: usize,
    pub cols: usize,
    pub lane_length: f64,
    pub speed_limit: f64,
    pub template: PhaseTemplate,
    pub one_way_arterials: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            file: None,
            rows: 2,
            cols: 2,
            lane_length: DEFAULT_LANE_LENGTH,
            speed_limit: DEFAULT_SPEED_LIMIT,
            template: PhaseTemplate::TwoPhase,
            one_way_arterials: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternName {
    DynamicTrain,
    DynamicTest,
    #[serde(rename = "fixed-600")]
    Fixed600,
    #[serde(rename = "fixed-800")]
    Fixed800,
    Custom,
}

impl PatternName {
    pub fn builtin(self) -> Option<DemandPattern> {
        match self {
            PatternName::DynamicTrain => Some(DemandPattern::DynamicTrain),
            PatternName::DynamicTest => Some(DemandPattern::DynamicTest),
            PatternName::Fixed600 => Some(DemandPattern::Fixed600),
            PatternName::Fixed800 => Some(DemandPattern::Fixed800),
            PatternName::Custom => None,
        }
    }
}

/// Arrival rates in veh/h per entry approach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    pub pattern: PatternName,
    /// Stage rates on arterial entries (custom pattern only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arterial: Option<Vec<f64>>,
    /// Stage rates on side-street entries (custom pattern only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<Vec<f64>>,
    pub stage_seconds: u32,
    pub turns: TurnProportions,
}

impl Default for DemandConfig {
    fn default() -> Self {
        DemandConfig {
            pattern: PatternName::DynamicTrain,
            arterial: None,
            side: None,
            stage_seconds: DYNAMIC_STAGE_SECONDS,
            turns: TurnProportions::default(),
        }
    }
}

impl DemandConfig {
    pub fn pattern(p: PatternName) -> Self {
        DemandConfig { pattern: p, ..Default::default() }
    }

    /// (arterial, side) stage rates and stage length.
    pub fn stages(&self) -> Result<(Vec<f64>, Vec<f64>, u32), ConfigError> {
        match self.pattern.builtin() {
            Some(p) => {
                let (a, s) = p.stages();
                Ok((a.to_vec(), s.to_vec(), DYNAMIC_STAGE_SECONDS))
            }
            None => match (&self.arterial, &self.side) {
                (Some(a), Some(s)) => Ok((a.clone(), s.clone(), self.stage_seconds)),
                _ => Err(ConfigError::new("custom demand needs both `arterial` and `side` stage rates")),
            },
        }
    }

    pub fn build(&self, net: &RoadNetwork, cv_penetration: f64) -> Result<DemandSpec, ConfigError> {
        let (a, s, len) = self.stages()?;
        Ok(DemandSpec::arterial_side(net, &a, &s, len, self.turns, cv_penetration))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub updates: u64,
    pub eval_every: u64,
    /// Greedy rounds per periodic evaluation.
    pub eval_rounds: usize,
    pub max_rounds: u64,
    pub hyperparams: Hyperparams,
    /// Checkpoint set to start from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PathBuf>,
    /// Which agent of the pretrain set every intersection loads when the set
    /// does not have one agent per intersection.
    pub pretrain_agent: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            updates: 6000,
            eval_every: 1000,
            eval_rounds: 4,
            max_rounds: 100_000,
            hyperparams: Hyperparams::default(),
            pretrain: None,
            pretrain_agent: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub rounds: usize,
    /// Penetration rates to sweep; empty means the scenario rate only.
    pub penetrations: Vec<f64>,
    /// Extra controllers evaluated on the same seeds.
    pub baselines: Vec<ControllerKind>,
    /// Demand at test time; defaults to the training demand.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demand: Option<DemandConfig>,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            rounds: DEFAULT_TEST_ROUNDS,
            penetrations: vec![],
            baselines: vec![],
            demand: None,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub master: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { master: 1 }
    }
}

impl SeedConfig {
    pub fn training(&self) -> u64 {
        derive_seed(self.master, 1)
    }

    pub fn training_eval(&self) -> u64 {
        derive_seed(self.master, 2)
    }

    /// Base of the test rounds; round `k` uses `derive_seed(test(), k)`.
    pub fn test(&self) -> u64 {
        derive_seed(self.master, 3)
    }

    pub fn init(&self) -> u64 {
        derive_seed(self.master, 4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub network: NetworkConfig,
    pub demand: DemandConfig,
    pub cv_penetration: f64,
    pub gmin: u32,
    pub gmax: u32,
    pub yellow: u32,
    pub all_red: u32,
    pub detection_radius: f64,
    pub round_length: u32,
    pub controller: ControllerSpec,
    /// Green seconds per phase for the fixed-time controller.
    pub fixed_greens: Vec<u32>,
    /// Which vehicles max-pressure sees.
    pub maxpressure_visibility: Subset,
    pub webster: WebsterParams,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub seeds: SeedConfig,
    /// Directory that relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let t = SignalTiming::default();
        ScenarioConfig {
            name: "scenario".into(),
            network: NetworkConfig::default(),
            demand: DemandConfig::default(),
            cv_penetration: DEFAULT_PENETRATION,
            gmin: t.min_green,
            gmax: t.max_green,
            yellow: t.yellow,
            all_red: t.all_red,
            detection_radius: DEFAULT_DETECTION_RADIUS,
            round_length: DEFAULT_ROUND_LENGTH,
            controller: ControllerSpec::default(),
            fixed_greens: vec![30, 30],
            maxpressure_visibility: Subset::Cv,
            webster: WebsterParams::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
            seeds: SeedConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

/// 1-based line and column of the first occurrence of `"key"` in `text`.
pub fn locate_key(text: &str, key: &str) -> Option<(usize, usize)> {
    let needle = format!("\"{key}\"");
    let off = text.find(&needle)?;
    let before = &text[..off];
    let line = before.matches('\n').count() + 1;
    let col = off - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    Some((line, col))
}

impl ScenarioConfig {
    pub fn grid(rows: usize, cols: usize) -> Self {
        ScenarioConfig { network: NetworkConfig { rows, cols, ..Default::default() }, ..Default::default() }
    }

    pub fn timing(&self) -> SignalTiming {
        SignalTiming { min_green: self.gmin, max_green: self.gmax, yellow: self.yellow, all_red: self.all_red }
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Parses `text`; `file` only labels diagnostics and anchors relative
    /// paths.
    pub fn from_json_str(text: &str, file: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg: ScenarioConfig = serde_json::from_str(text)
            .map_err(|e| ConfigError::new(strip_position(&e)).at(file, Some((e.line(), e.column()))))?;
        if let Some(dir) = file.and_then(Path::parent) {
            cfg.base_dir = dir.to_path_buf();
        }
        if let Err((key, msg)) = cfg.check() {
            return Err(ConfigError::new(msg).at(file, key.and_then(|k| locate_key(text, k))));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("cannot read config: {e}")).at(Some(path), None))?;
        ScenarioConfig::from_json_str(&text, Some(path))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", cvlight_core::fingerprint::fnv64(serde_json::to_string(self).expect("config").as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.check().map_err(|(_, m)| ConfigError::new(m))
    }

    /// Semantic checks; the error names the offending key when there is one.
    fn check(&self) -> Result<(), (Option<&'static str>, String)> {
        let fail = |k: &'static str, m: String| Err((Some(k), m));
        if !(0.0..=1.0).contains(&self.cv_penetration) || self.cv_penetration.is_nan() {
            return fail("cv_penetration", format!("cv_penetration {} outside [0, 1]", self.cv_penetration));
        }
        for &p in &self.evaluation.penetrations {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return fail("penetrations", format!("sweep penetration {p} outside [0, 1]"));
            }
        }
        if self.gmin == 0 {
            return fail("gmin", "gmin must be at least 1 s".into());
        }
        if self.gmax < self.gmin {
            return fail("gmax", format!("gmax {} below gmin {}", self.gmax, self.gmin));
        }
        if self.round_length == 0 {
            return fail("round_length", "round_length must be positive".into());
        }
        if !(self.detection_radius > 0.0) {
            return fail("detection_radius", "detection_radius must be positive".into());
        }
        if self.network.file.is_none() {
            if self.network.rows == 0 || self.network.cols == 0 {
                return fail("network", "grid needs at least one row and one column".into());
            }
            if !(self.network.lane_length > 0.0) || !(self.network.speed_limit > 0.0) {
                return fail("network", "lane_length and speed_limit must be positive".into());
            }
        } else if let Some(f) = &self.network.file {
            let p = self.resolve_path(f);
            if !p.exists() {
                return fail("file", format!("network file {} not found", p.display()));
            }
        }
        if let Some(p) = &self.training.pretrain {
            let p = self.resolve_path(p);
            if !p.exists() {
                return fail("pretrain", format!("pretrain checkpoint {} not found", p.display()));
            }
        }
        for (key, d) in [("demand", Some(&self.demand)), ("evaluation", self.evaluation.demand.as_ref())] {
            let Some(d) = d else { continue };
            let (a, s, len) = d.stages().map_err(|e| (Some(key), e.message))?;
            if a.is_empty() || a.len() != s.len() {
                return fail(key, "arterial and side stage lists must be non-empty and of equal length".into());
            }
            if a.iter().chain(&s).any(|r| !(*r >= 0.0) || !r.is_finite()) {
                return fail(key, "stage rates must be finite and non-negative".into());
            }
            if a.len() > 1 && len == 0 {
                return fail(key, "stage_seconds must be positive".into());
            }
            if a.len() > 1 && (a.len() as u64) * (len as u64) < self.round_length as u64 {
                return fail(
                    key,
                    format!("{} stages of {len} s do not cover round_length {}", a.len(), self.round_length),
                );
            }
            let t = d.turns;
            if (t.through + t.left + t.right - 1.0).abs() > 1e-9
                || [t.through, t.left, t.right].iter().any(|x| *x < 0.0)
            {
                return fail("turns", "turn fractions must be non-negative and sum to 1".into());
            }
        }
        if self.fixed_greens.is_empty() || self.fixed_greens.iter().any(|g| *g == 0) {
            return fail("fixed_greens", "fixed_greens must be non-empty and positive".into());
        }
        if let ControllerSpec::PerIntersection(v) = &self.controller {
            if v.is_empty() {
                return fail("controller", "controller list is empty".into());
            }
        }
        if self.evaluation.rounds == 0 {
            return fail("rounds", "evaluation needs at least one round".into());
        }
        self.training.hyperparams.validate().map_err(|e| (Some("hyperparams"), e.to_string()))?;
        Ok(())
    }

    /// Builds the network with the configured timing and detection radius.
    pub fn build_network(&self) -> anyhow::Result<RoadNetwork> {
        let mut net = match &self.network.file {
            Some(f) => files::read_network(&self.resolve_path(f))?.network,
            None => build_grid(&GridSpec {
                rows: self.network.rows,
                cols: self.network.cols,
                lane_length: self.network.lane_length,
                speed_limit: self.network.speed_limit,
                template: self.network.template,
                timing: self.timing(),
                one_way_arterials: self.network.one_way_arterials,
                detection_radius: self.detection_radius,
            })?,
        };
        if self.network.file.is_some() {
            for node in &mut net.intersections {
                node.plan.timing = self.timing();
                node.detection_radius = self.detection_radius;
            }
            net.validate()?;
        }
        let kinds = self.controller.resolve(net.intersections.len());
        if kinds.len() != net.intersections.len() {
            return Err(ConfigError::new(format!(
                "controller list has {} entries for {} intersections",
                kinds.len(),
                net.intersections.len()
            ))
            .into());
        }
        Ok(net)
    }

    pub fn train_demand(&self, net: &RoadNetwork) -> Result<DemandSpec, ConfigError> {
        self.demand.build(net, self.cv_penetration)
    }

    pub fn test_demand(&self, net: &RoadNetwork, cv_penetration: f64) -> Result<DemandSpec, ConfigError> {
        self.evaluation.demand.as_ref().unwrap_or(&self.demand).build(net, cv_penetration)
    }

    /// Penetrations evaluated by `eval`.
    pub fn sweep(&self) -> Vec<f64> {
        if self.evaluation.penetrations.is_empty() {
            vec![self.cv_penetration]
        } else {
            self.evaluation.penetrations.clone()
        }
    }
}

fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}
