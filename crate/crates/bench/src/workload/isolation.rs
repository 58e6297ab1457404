//! Latency isolation between a bulk tenant and a latency-sensitive probe
//! on hosts with two or more engines.
//!
//! Three cases run with the same seed: the probe alone (baseline), the
//! probe pinned to an engine the bulk flows never touch (pinned), and
//! every channel on a randomly drawn engine (unpinned).

use bytes::Bytes;
use lcdnet::{Channel, ChannelError, EnginePolicy, FlowHandle, Message, QueueId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::{RunOutput, Table};
use crate::scenario::{IsolationSpec, Scenario};
use crate::stats::LatencyRecord;
use crate::testbed::{drain, Testbed};
use crate::{row, BenchError};

const BULK_PORT: u16 = 100;
const PROBE_PORT: u16 = 200;
/// Bulk traffic runs this long before the first probe.
const WARMUP_US: u64 = 2_000;
const LIMIT_US: u64 = 60_000_000;

pub const COLUMNS: &[&str] =
    &["case", "placements", "samples", "p50_us", "p99_us", "p999_us", "max_us", "bulk_messages"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    Baseline,
    Pinned,
    Unpinned,
}

impl Case {
    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Pinned => "pinned",
            Self::Unpinned => "unpinned",
        }
    }
}

struct Placement {
    /// (client engine, server engine) per bulk flow.
    bulk: Vec<(u16, u16)>,
    probe: (u16, u16),
}

impl Placement {
    fn fixed(bulk_flows: usize, bulk: bool) -> Self {
        Self { bulk: if bulk { vec![(0, 0); bulk_flows] } else { Vec::new() }, probe: (1, 1) }
    }

    fn random(bulk_flows: usize, engines: (u16, u16), rng: &mut ChaCha8Rng) -> Self {
        let mut draw = || (rng.gen_range(0..engines.0), rng.gen_range(0..engines.1));
        let bulk = (0..bulk_flows).map(|_| draw()).collect();
        Self { bulk, probe: draw() }
    }
}

struct CaseResult {
    latencies: Vec<u64>,
    bulk_messages: u64,
    violations: Vec<String>,
    engines: Table,
}

fn pinned(e: u16) -> EnginePolicy {
    EnginePolicy::Pinned(QueueId(e))
}

fn echo_pending(srv: &Channel, backlog: &mut Vec<Message>) -> Result<(), ChannelError> {
    while let Some(m) = srv.recv(false, None)? {
        backlog.push(m);
    }
    while let Some(m) = backlog.first() {
        match srv.try_send(m.flow, m.payload.clone()) {
            Ok(()) => {
                backlog.remove(0);
            }
            Err(ChannelError::Full) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn run_case(sc: &Scenario, spec: &IsolationSpec, seed: u64, placement: &Placement) -> Result<CaseResult, BenchError> {
    let mut tb = Testbed::new(sc, seed)?;
    let mut bulk: Vec<(Channel, Channel, FlowHandle, u64, u64)> = Vec::new();
    let mut bulk_servers = Vec::new();
    for (i, &(_, s)) in placement.bulk.iter().enumerate() {
        let srv = tb.attach(tb.server, pinned(s))?;
        srv.listen(BULK_PORT + i as u16)?;
        bulk_servers.push(srv);
    }
    let probe_srv = tb.attach(tb.server, pinned(placement.probe.1))?;
    probe_srv.listen(PROBE_PORT)?;
    let bulk_clients: Vec<Channel> =
        placement.bulk.iter().map(|&(c, _)| tb.attach(tb.client, pinned(c))).collect::<Result<_, _>>()?;
    let probe_cli = tb.attach(tb.client, pinned(placement.probe.0))?;
    tb.settle();
    for (i, (cli, srv)) in bulk_clients.into_iter().zip(bulk_servers).enumerate() {
        let flow = tb.connect(&cli, BULK_PORT + i as u16)?;
        bulk.push((cli, srv, flow, 0, 0));
    }
    let probe_flow = tb.connect(&probe_cli, PROBE_PORT)?;

    let bulk_payload = Bytes::from(vec![0xb0; spec.bulk_msg_size.0]);
    let probe_payload = Bytes::from(vec![0x9e; spec.probe_msg_size.0]);
    let start = tb.sim.now() + WARMUP_US;
    let mut next_probe = start;
    let mut in_flight: Option<u64> = None;
    let mut backlog = Vec::new();
    let mut latencies = Vec::with_capacity(spec.probe);
    let deadline = tb.sim.now() + LIMIT_US;

    while latencies.len() < spec.probe && tb.sim.now() < deadline {
        tb.sim.advance(1);
        let now = tb.sim.now();
        for (cli, srv, flow, sent, got) in &mut bulk {
            *got += drain(srv).len() as u64;
            while *sent - *got < spec.bulk_inflight as u64 && cli.try_send(*flow, bulk_payload.clone()).is_ok() {
                *sent += 1;
            }
        }
        echo_pending(&probe_srv, &mut backlog)?;
        if let Some(m) = probe_cli.recv(false, None)? {
            if m.payload != probe_payload {
                return Err(BenchError::Setup("probe reply corrupted".into()));
            }
            let sent_at = in_flight.take().ok_or_else(|| BenchError::Setup("unexpected probe reply".into()))?;
            latencies.push(now - sent_at);
            next_probe = now + spec.probe_gap_us;
        }
        if in_flight.is_none() && now >= next_probe {
            probe_cli.try_send(probe_flow, probe_payload.clone())?;
            in_flight = Some(now);
        }
    }

    let bulk_messages = bulk.iter().map(|b| b.4).sum();
    tb.sim.advance(1_000);
    let mut channels: Vec<&Channel> = vec![&probe_srv, &probe_cli];
    for b in &bulk {
        channels.push(&b.0);
        channels.push(&b.1);
    }
    channels.iter().for_each(|c| {
        drain(c);
    });
    let mut violations = Vec::new();
    if latencies.len() < spec.probe {
        violations.push(format!("only {} of {} probes completed", latencies.len(), spec.probe));
    }
    let shared = tb.sim.shared_nothing_violations();
    if shared != 0 {
        violations.push(format!("{shared} shared-nothing violations"));
    }
    if !tb.sim.fabric().conserved() {
        violations.push("fabric frames not conserved".into());
    }
    Ok(CaseResult { latencies, bulk_messages, violations, engines: tb.engine_table() })
}

/// Latencies for one case, pooled over its placements.
pub fn measure(sc: &Scenario, spec: &IsolationSpec, seed: u64, case: Case) -> Result<(Vec<u64>, u64, Vec<String>, Table), BenchError> {
    let engines = (sc.hosts[sc.client].engines as u16, sc.hosts[sc.server].engines as u16);
    if engines.0 < 2 || engines.1 < 2 {
        return Err(BenchError::Setup("isolation needs at least two engines on each host".into()));
    }
    let placements = match case {
        Case::Baseline => vec![Placement::fixed(spec.bulk_flows, false)],
        Case::Pinned => vec![Placement::fixed(spec.bulk_flows, true)],
        Case::Unpinned => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x150_1a7e);
            (0..spec.placements).map(|_| Placement::random(spec.bulk_flows, engines, &mut rng)).collect()
        }
    };
    let (mut lat, mut bulk, mut violations, mut table) = (Vec::new(), 0, Vec::new(), Table::default());
    for p in &placements {
        let r = run_case(sc, spec, seed, p)?;
        lat.extend(r.latencies);
        bulk += r.bulk_messages;
        violations.extend(r.violations);
        table = r.engines;
    }
    Ok((lat, bulk, violations, table))
}

pub fn run(sc: &Scenario, spec: &IsolationSpec, seed: u64) -> Result<RunOutput, BenchError> {
    let mut results = Table::new(COLUMNS);
    let mut violations = Vec::new();
    let mut engines = Table::default();
    for case in [Case::Baseline, Case::Pinned, Case::Unpinned] {
        let (lat, bulk, v, table) = measure(sc, spec, seed, case)?;
        let r = LatencyRecord::from_samples(&lat);
        let placements = if case == Case::Unpinned { spec.placements } else { 1 };
        results.push(row![case.label(), placements, r.samples, r.p50, r.p99, r.p999, r.max, bulk]);
        violations.extend(v);
        if case == Case::Pinned {
            engines = table;
        }
    }
    Ok(RunOutput { results, engines, violations })
}
