//! Files, configuration and experiment orchestration around `cvlight-core`.

pub mod config;
pub mod files;
pub mod harness;

pub use config::{ConfigError, ControllerKind, ScenarioConfig};
pub use harness::{run_analysis, run_evaluation, run_training, ExperimentReport, Scenario, TrainOptions};

/// Failure class of a command, mapped onto the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Runtime,
    Numeric,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 3,
            Category::Runtime => 4,
            Category::Numeric => 5,
        }
    }
}

/// Classifies an error by the first recognised cause in its chain.
pub fn categorize(err: &anyhow::Error) -> Category {
    use cvlight_core::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return Category::Config;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite(_) => Category::Numeric,
                E::Config(_) | E::InvalidNetwork(_) | E::LayoutMismatch { .. } | E::ThresholdTooHigh(_) => {
                    Category::Config
                }
                _ => Category::Runtime,
            };
        }
        if cause.is::<serde_json::Error>() {
            return Category::Config;
        }
    }
    Category::Runtime
}
