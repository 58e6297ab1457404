//! Scenario files: TOML with `hosts`, `fabric`, `engine`, `workload`,
//! `seed` and `output` keys. Errors carry the line they came from.

use std::fmt;
use std::net::Ipv4Addr;
use std::ops::Range;
use std::path::{Path, PathBuf};

use lcdnet::fabric::FabricConfig;
use lcdnet::handshake::SprayMode;
use lcdnet::wire::MAX_MESSAGE_LEN;
use lcdnet::HostConfig;
use serde::de::{self, Deserializer};
use serde::Deserialize;
use toml::Spanned;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    pub path: Option<PathBuf>,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = self.path.as_deref().map(Path::display);
        match path {
            Some(p) => write!(f, "{p}:{}:{}: {}", self.line, self.column, self.message),
            None => write!(f, "line {}, column {}: {}", self.line, self.column, self.message),
        }
    }
}

impl std::error::Error for ScenarioError {}

/// 1-based line and column of a byte offset.
fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Message size that refuses anything above the transport limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsgSize(pub usize);

impl<'de> Deserialize<'de> for MsgSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = usize::deserialize(d)?;
        if v == 0 || v > MAX_MESSAGE_LEN {
            return Err(de::Error::custom(format!("msg_size {v} outside 1..={MAX_MESSAGE_LEN}")));
        }
        Ok(Self(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Naive,
    Optimized,
}

impl From<Mode> for SprayMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Naive => SprayMode::Naive,
            Mode::Optimized => SprayMode::Optimized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecvMode {
    Blocking,
    Polling,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHost {
    ip: Spanned<Ipv4Addr>,
    engines: Spanned<usize>,
    #[serde(default = "default_max_queues")]
    max_queues: usize,
}

fn default_max_queues() -> usize {
    64
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawFabric {
    loss_probability: f64,
    reorder_probability: f64,
    base_delay_us: u64,
    delay_jitter_us: u64,
    hash_byte_swap: bool,
}

impl Default for RawFabric {
    fn default() -> Self {
        let d = FabricConfig::default();
        Self {
            loss_probability: d.loss_probability,
            reorder_probability: d.reorder_probability,
            base_delay_us: d.base_delay_us,
            delay_jitter_us: d.delay_jitter_us,
            hash_byte_swap: d.hash_byte_swap,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawEngine {
    spray_mode: Mode,
    per_item_cost_us: u64,
    sack: bool,
}

impl Default for RawEngine {
    fn default() -> Self {
        Self { spray_mode: Mode::Optimized, per_item_cost_us: 1, sack: true }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoSpec {
    #[serde(default)]
    pub client: Option<Spanned<Ipv4Addr>>,
    #[serde(default)]
    pub server: Option<Spanned<Ipv4Addr>>,
    pub msg_size: MsgSize,
    #[serde(default = "one")]
    pub inflight: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnSetupSpec {
    #[serde(default)]
    pub client: Option<Spanned<Ipv4Addr>>,
    #[serde(default)]
    pub server: Option<Spanned<Ipv4Addr>>,
    /// Connects started together in one round.
    #[serde(default = "one")]
    pub pairs: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsolationSpec {
    #[serde(default)]
    pub client: Option<Spanned<Ipv4Addr>>,
    #[serde(default)]
    pub server: Option<Spanned<Ipv4Addr>>,
    pub bulk_flows: usize,
    /// Probe round trips measured per case.
    pub probe: usize,
    #[serde(default = "default_bulk_size")]
    pub bulk_msg_size: MsgSize,
    #[serde(default = "default_bulk_inflight")]
    pub bulk_inflight: usize,
    #[serde(default = "default_probe_size")]
    pub probe_msg_size: MsgSize,
    #[serde(default = "default_probe_gap")]
    pub probe_gap_us: u64,
    /// Random placements averaged for the unpinned case.
    #[serde(default = "default_placements")]
    pub placements: usize,
}

fn one() -> usize {
    1
}
fn default_bulk_size() -> MsgSize {
    MsgSize(64 * 1024)
}
fn default_bulk_inflight() -> usize {
    4
}
fn default_probe_size() -> MsgSize {
    MsgSize(64)
}
fn default_probe_gap() -> u64 {
    20
}
fn default_placements() -> usize {
    8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockingSpec {
    pub threads: usize,
    pub mode: RecvMode,
    #[serde(default = "default_requests")]
    pub requests: usize,
    /// Extra randomized single-message rounds checking for lost wakeups.
    #[serde(default)]
    pub interleavings: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_requests() -> usize {
    1000
}
fn default_timeout_ms() -> u64 {
    1000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    #[serde(default)]
    pub client: Option<Spanned<Ipv4Addr>>,
    #[serde(default)]
    pub server: Option<Spanned<Ipv4Addr>>,
    pub count: usize,
    #[serde(default = "default_min_size")]
    pub min_size: MsgSize,
    #[serde(default = "default_max_size")]
    pub max_size: MsgSize,
    #[serde(default = "default_outstanding")]
    pub max_outstanding: usize,
}

fn default_min_size() -> MsgSize {
    MsgSize(1)
}
fn default_max_size() -> MsgSize {
    MsgSize(MAX_MESSAGE_LEN)
}
fn default_outstanding() -> usize {
    16
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    Echo(EchoSpec),
    ConnSetup(ConnSetupSpec),
    Isolation(IsolationSpec),
    Blocking(BlockingSpec),
    Transfer(TransferSpec),
}

impl Workload {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Echo(_) => "echo",
            Self::ConnSetup(_) => "conn_setup",
            Self::Isolation(_) => "isolation",
            Self::Blocking(_) => "blocking",
            Self::Transfer(_) => "transfer",
        }
    }

    fn endpoints(&self) -> (Option<&Spanned<Ipv4Addr>>, Option<&Spanned<Ipv4Addr>>) {
        match self {
            Self::Echo(s) => (s.client.as_ref(), s.server.as_ref()),
            Self::ConnSetup(s) => (s.client.as_ref(), s.server.as_ref()),
            Self::Isolation(s) => (s.client.as_ref(), s.server.as_ref()),
            Self::Transfer(s) => (s.client.as_ref(), s.server.as_ref()),
            Self::Blocking(_) => (None, None),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    output: Option<PathBuf>,
    hosts: Spanned<Vec<RawHost>>,
    #[serde(default)]
    fabric: RawFabric,
    #[serde(default)]
    engine: RawEngine,
    workload: Spanned<Workload>,
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub hosts: Vec<HostConfig>,
    pub fabric: FabricConfig,
    pub workload: Workload,
    /// Indices into `hosts`.
    pub client: usize,
    pub server: usize,
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let src = std::fs::read_to_string(path).map_err(|e| ScenarioError {
            path: Some(path.to_owned()),
            line: 0,
            column: 0,
            message: e.to_string(),
        })?;
        Self::parse(&src).map_err(|e| ScenarioError { path: Some(path.to_owned()), ..e })
    }

    pub fn parse(src: &str) -> Result<Self, ScenarioError> {
        let at = |span: Range<usize>, message: String| {
            let (line, column) = line_col(src, span.start);
            ScenarioError { path: None, line, column, message }
        };
        let raw: RawScenario = toml::from_str(src).map_err(|e| {
            at(e.span().unwrap_or(0..0), e.message().to_string())
        })?;

        let mut hosts: Vec<HostConfig> = Vec::new();
        for h in raw.hosts.get_ref() {
            if *h.engines.get_ref() == 0 || *h.engines.get_ref() > h.max_queues {
                return Err(at(
                    h.engines.span(),
                    format!("engines must be in 1..={}", h.max_queues),
                ));
            }
            if hosts.iter().any(|o| o.ip == *h.ip.get_ref()) {
                return Err(at(h.ip.span(), format!("host {} defined twice", h.ip.get_ref())));
            }
            let mut cfg = HostConfig::new(*h.ip.get_ref(), *h.engines.get_ref());
            cfg.max_queues = h.max_queues;
            cfg.engine.spray.mode = raw.engine.spray_mode.into();
            cfg.engine.per_item_cost_us = raw.engine.per_item_cost_us;
            cfg.engine.transport.sack_enabled = raw.engine.sack;
            hosts.push(cfg);
        }
        if hosts.len() < 2 {
            return Err(at(raw.hosts.span(), "at least two hosts are required".into()));
        }

        let find = |ip: Option<&Spanned<Ipv4Addr>>, default: usize| match ip {
            None => Ok(default),
            Some(ip) => hosts
                .iter()
                .position(|h| h.ip == *ip.get_ref())
                .ok_or_else(|| at(ip.span(), format!("host {} is not defined", ip.get_ref()))),
        };
        let workload = raw.workload.get_ref();
        let (client, server) = workload.endpoints();
        let (client, server) = (find(client, 0)?, find(server, 1)?);
        if client == server {
            return Err(at(raw.workload.span(), "client and server must be different hosts".into()));
        }
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(at(raw.workload.span(), format!("{what} must be at least 1")))
            } else {
                Ok(())
            }
        };
        match workload {
            Workload::Echo(s) => {
                positive("count", s.count)?;
                positive("inflight", s.inflight)?;
            }
            Workload::ConnSetup(s) => {
                positive("pairs", s.pairs)?;
                positive("trials", s.trials)?;
            }
            Workload::Isolation(s) => {
                positive("probe", s.probe)?;
                positive("placements", s.placements)?;
                positive("bulk_inflight", s.bulk_inflight)?;
            }
            Workload::Blocking(s) => {
                positive("threads", s.threads)?;
                positive("requests", s.requests)?;
            }
            Workload::Transfer(s) => {
                positive("count", s.count)?;
                positive("max_outstanding", s.max_outstanding)?;
                if s.min_size.0 > s.max_size.0 {
                    return Err(at(raw.workload.span(), "min_size exceeds max_size".into()));
                }
            }
        }

        let fabric = FabricConfig {
            loss_probability: raw.fabric.loss_probability,
            reorder_probability: raw.fabric.reorder_probability,
            base_delay_us: raw.fabric.base_delay_us,
            delay_jitter_us: raw.fabric.delay_jitter_us,
            rng_seed: 0,
            hash_byte_swap: raw.fabric.hash_byte_swap,
        };
        fabric.validate().map_err(|e| at(0..0, e.to_string()))?;

        Ok(Self {
            seed: raw.seed,
            output: raw.output,
            hosts,
            fabric,
            workload: raw.workload.into_inner(),
            client,
            server,
        })
    }
}
