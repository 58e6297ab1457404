//! Closed-loop echo: the client keeps `inflight` requests outstanding on
//! one flow and the server reflects each one.

use std::collections::VecDeque;

use bytes::Bytes;
use lcdnet::{ChannelError, EnginePolicy, Message};

use crate::report::{RunOutput, Table};
use crate::scenario::{EchoSpec, Scenario};
use crate::stats::LatencyRecord;
use crate::testbed::{drain, Testbed};
use crate::{row, BenchError};

pub const PORT: u16 = 7;
const LIMIT_US: u64 = 600_000_000;

pub const COLUMNS: &[&str] = &[
    "seed",
    "msg_size",
    "inflight",
    "count",
    "completed",
    "corrupted",
    "p50_us",
    "p99_us",
    "p999_us",
    "max_us",
    "elapsed_us",
    "retransmissions",
];

pub fn run(sc: &Scenario, spec: &EchoSpec, seed: u64) -> Result<RunOutput, BenchError> {
    let mut tb = Testbed::new(sc, seed)?;
    let srv = tb.attach(tb.server, EnginePolicy::RoundRobin)?;
    srv.listen(PORT)?;
    let cli = tb.attach(tb.client, EnginePolicy::RoundRobin)?;
    tb.settle();
    let flow = tb.connect(&cli, PORT)?;

    let payload = Bytes::from(vec![0x5a; spec.msg_size.0]);
    let mut sent_at = VecDeque::new();
    let mut echo_backlog: VecDeque<Message> = VecDeque::new();
    let mut latencies = Vec::with_capacity(spec.count);
    let (mut issued, mut corrupted) = (0, 0);
    let mut failure: Option<ChannelError> = None;
    let start = tb.sim.now();

    tb.sim.run_while(LIMIT_US, |sim| {
        let now = sim.now();
        loop {
            if let Some(m) = echo_backlog.front() {
                match srv.try_send(m.flow, m.payload.clone()) {
                    Ok(()) => {
                        echo_backlog.pop_front();
                        continue;
                    }
                    Err(ChannelError::Full) => break,
                    Err(e) => {
                        failure = Some(e);
                        return true;
                    }
                }
            }
            match srv.recv(false, None) {
                Ok(Some(m)) => echo_backlog.push_back(m),
                Ok(None) => break,
                Err(e) => {
                    failure = Some(e);
                    return true;
                }
            }
        }
        while let Ok(Some(m)) = cli.recv(false, None) {
            if m.payload != payload {
                corrupted += 1;
            }
            if let Some(t) = sent_at.pop_front() {
                latencies.push(now - t);
            }
        }
        while issued < spec.count && sent_at.len() < spec.inflight {
            match cli.try_send(flow, payload.clone()) {
                Ok(()) => {
                    sent_at.push_back(now);
                    issued += 1;
                }
                Err(ChannelError::Full) => break,
                Err(e) => {
                    failure = Some(e);
                    return true;
                }
            }
        }
        latencies.len() == spec.count
    });
    let elapsed = tb.sim.now() - start;
    if let Some(e) = failure {
        return Err(e.into());
    }
    tb.sim.advance(1_000);
    drain(&srv);
    drain(&cli);

    let mut violations = tb.audit(&[&srv, &cli]);
    if latencies.len() != spec.count {
        violations.push(format!("only {} of {} round trips completed", latencies.len(), spec.count));
    }
    if corrupted != 0 {
        violations.push(format!("{corrupted} corrupted replies"));
    }
    let lat = LatencyRecord::from_samples(&latencies);
    let mut results = Table::new(COLUMNS);
    results.push(row![
        seed,
        spec.msg_size.0,
        spec.inflight,
        spec.count,
        latencies.len(),
        corrupted,
        lat.p50,
        lat.p99,
        lat.p999,
        lat.max,
        elapsed,
        tb.sim.transport_totals().0.retransmissions
    ]);
    Ok(RunOutput { results, engines: tb.engine_table(), violations })
}
