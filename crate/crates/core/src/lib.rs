//! Core of the CVLight traffic-signal laboratory.
//!
//! Everything in this crate is deterministic, allocation-only and free of IO:
//! grid network generation ([`netmodel`]), a discrete-time microscopic
//! simulator ([`simcore`]), connected-vehicle observations and pressure
//! ([`sensing`]), baseline controllers ([`agents`]), dense networks with Adam
//! ([`neural`]), learning agents and the training loop ([`train`]) and the
//! evaluation metrics ([`metrics`]).
//!
//! File formats, configuration and the command line live in the `cvlight`
//! companion crate.

#![no_std]
// Index loops over parallel buffers read better than zipped iterators here.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

extern crate alloc;

pub mod agents;
pub mod error;
pub mod fingerprint;
pub mod math;
pub mod metrics;
pub mod netmodel;
pub mod neural;
pub mod rng;
pub mod sensing;
pub mod simcore;
pub mod train;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::agents::{ControllerDecision, FixedTime, MaxPressure, Webster};
    pub use crate::error::{Error, Result};
    pub use crate::metrics::{aggregate_rounds, m_delay, RoundMetrics};
    pub use crate::netmodel::{build_grid, DemandSpec, GridSpec, PhaseTemplate, RoadNetwork};
    pub use crate::sensing::{observe, pressure, reward, ObservationBundle, ObservationLayout};
    pub use crate::simcore::{run_round, Controller, EventLog, LogConfig, SimConfig, Simulation};
    pub use crate::train::{AgentBundle, AgentKind, Hyperparams};
}
