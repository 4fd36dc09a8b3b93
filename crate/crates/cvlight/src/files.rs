//! On-disk formats: network documents, JSONL event logs and checkpoints.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cvlight_core::netmodel::{DemandSpec, RoadNetwork};
use cvlight_core::sensing::ObservationLayout;
use cvlight_core::simcore::{Event, EventLog};
use cvlight_core::train::{AgentBundle, Checkpoint};

use crate::config::ConfigError;

pub const NETWORK_FORMAT: &str = "cvlight-network";
pub const CHECKPOINT_SET_FORMAT: &str = "cvlight-checkpoint-set";
pub const FORMAT_VERSION: u32 = 1;

/// A network plus, optionally, the demand it was generated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub format: String,
    pub version: u32,
    pub network: RoadNetwork,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<DemandSpec>,
}

impl NetworkDocument {
    pub fn new(network: RoadNetwork, demand: Option<DemandSpec>) -> Self {
        NetworkDocument { format: NETWORK_FORMAT.into(), version: FORMAT_VERSION, network, demand }
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let msg = msg.rfind(" at line ").map(|i| msg[..i].to_string()).unwrap_or(msg);
        ConfigError { file: Some(path.to_path_buf()), line: Some(e.line()), column: Some(e.column()), message: msg }
            .into()
    })
}

fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_string(&mut s)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(s)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_network(doc: &NetworkDocument, path: &Path) -> Result<()> {
    write_json(doc, path)
}

/// Reads and validates a network document.
pub fn read_network(path: &Path) -> Result<NetworkDocument> {
    let doc: NetworkDocument = parse_json(&read_text(path)?, path)?;
    if doc.format != NETWORK_FORMAT || doc.version != FORMAT_VERSION {
        bail!(ConfigError::new(format!(
            "{}: unsupported network document {} v{}",
            path.display(),
            doc.format,
            doc.version
        )));
    }
    doc.network.validate().with_context(|| format!("network in {}", path.display()))?;
    if let Some(d) = &doc.demand {
        let problems = d.validate(&doc.network);
        if !problems.is_empty() {
            bail!(ConfigError::new(format!("{}: invalid demand: {}", path.display(), problems.join("; "))));
        }
    }
    Ok(doc)
}

/// One JSON object per line.
pub fn write_events<W: Write>(log: &EventLog, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    for e in log.iter() {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_events(log: &EventLog, path: &Path) -> Result<()> {
    write_events(log, File::create(path).with_context(|| format!("creating {}", path.display()))?)
}

pub fn read_events<R: Read>(r: R) -> Result<EventLog> {
    let mut log = EventLog::default();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Event = serde_json::from_str(&line).with_context(|| format!("event log line {}", i + 1))?;
        log.events.push(e);
    }
    Ok(log)
}

pub fn load_events(path: &Path) -> Result<EventLog> {
    read_events(File::open(path).with_context(|| format!("opening {}", path.display()))?)
}

/// Writes one serializable record per line.
pub struct JsonlWriter<W: Write> {
    inner: BufWriter<W>,
}

impl JsonlWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlWriter {
            inner: BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?),
        })
    }
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(w: W) -> Self {
        JsonlWriter { inner: BufWriter::new(w) }
    }

    pub fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, rec)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn save_checkpoint(agent: &AgentBundle, path: &Path) -> Result<()> {
    write_json(&agent.to_checkpoint(), path)
}

/// Loads one agent; refuses checkpoints whose layout differs from `expected`.
pub fn load_checkpoint(path: &Path, expected: &ObservationLayout) -> Result<AgentBundle> {
    let ck: Checkpoint = parse_json(&read_text(path)?, path)?;
    AgentBundle::from_checkpoint(&ck, expected).with_context(|| format!("loading {}", path.display()))
}

/// The agents of one scenario, in intersection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSet {
    pub format: String,
    pub version: u32,
    /// Minimum update count over agents when saved.
    pub update: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_m_delay: Option<f64>,
    pub agents: Vec<Checkpoint>,
}

impl CheckpointSet {
    pub fn from_agents(agents: &[AgentBundle], update: u64, eval_m_delay: Option<f64>) -> Self {
        CheckpointSet {
            format: CHECKPOINT_SET_FORMAT.into(),
            version: FORMAT_VERSION,
            update,
            eval_m_delay,
            agents: agents.iter().map(AgentBundle::to_checkpoint).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    /// Accepts a set file or a single-agent checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let v: serde_json::Value = parse_json(&text, path)?;
        let format = v.get("format").and_then(|f| f.as_str()).unwrap_or_default();
        if format == cvlight_core::train::CHECKPOINT_FORMAT {
            let ck: Checkpoint = parse_json(&text, path)?;
            return Ok(CheckpointSet {
                format: CHECKPOINT_SET_FORMAT.into(),
                version: FORMAT_VERSION,
                update: ck.updates,
                eval_m_delay: None,
                agents: vec![ck],
            });
        }
        let set: CheckpointSet = parse_json(&text, path)?;
        if set.format != CHECKPOINT_SET_FORMAT || set.version != FORMAT_VERSION {
            bail!(ConfigError::new(format!(
                "{}: unsupported checkpoint set {} v{}",
                path.display(),
                set.format,
                set.version
            )));
        }
        if set.agents.is_empty() {
            bail!(ConfigError::new(format!("{}: checkpoint set has no agents", path.display())));
        }
        Ok(set)
    }

    /// Checkpoint for intersection `i` of `n`: one per intersection when the
    /// counts agree, otherwise `fallback` for all.
    pub fn for_intersection(&self, i: usize, n: usize, fallback: usize) -> Result<&Checkpoint> {
        let idx = if self.agents.len() == n { i } else { fallback };
        self.agents
            .get(idx)
            .with_context(|| format!("checkpoint set has {} agents, cannot pick agent {idx}", self.agents.len()))
    }
}
