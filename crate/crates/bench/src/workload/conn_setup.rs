//! Connection setup latency. Each round starts `pairs` connects at once,
//! records how each one went, then closes them.

use lcdnet::channel::ConnectStatus;
use lcdnet::{Channel, EnginePolicy};

use crate::report::{RunOutput, Table};
use crate::scenario::{ConnSetupSpec, Scenario};
use crate::testbed::{drain, Testbed};
use crate::{row, BenchError};

pub const PORT: u16 = 1;
const ROUND_LIMIT_US: u64 = 10_000_000;
/// Time allowed after each round for close handshakes.
const CLOSE_DRAIN_US: u64 = 2_000;

pub const COLUMNS: &[&str] =
    &["trial", "client_engine", "established", "attempts", "first_batch", "setup_us", "syns_sent"];

pub fn run(sc: &Scenario, spec: &ConnSetupSpec, seed: u64) -> Result<RunOutput, BenchError> {
    let mut tb = Testbed::new(sc, seed)?;
    let srv = tb.attach(tb.server, EnginePolicy::RoundRobin)?;
    srv.listen(PORT)?;
    let clis: Vec<Channel> =
        (0..spec.pairs).map(|_| tb.attach(tb.client, EnginePolicy::RoundRobin)).collect::<Result<_, _>>()?;
    tb.settle();

    let server_ip = tb.server_ip();
    let mut results = Table::new(COLUMNS);
    let mut violations = Vec::new();
    let mut trial = 0;
    while trial < spec.trials {
        let k = spec.pairs.min(spec.trials - trial);
        let flows = clis[..k].iter().map(|c| c.connect_start(server_ip, PORT)).collect::<Result<Vec<_>, _>>()?;
        let pending = |c: &Channel, f| matches!(c.poll_connect(f), Some(ConnectStatus::Pending));
        tb.sim.run_while(ROUND_LIMIT_US, |_| !clis.iter().zip(&flows).any(|(c, &f)| pending(c, f)));
        for (c, &f) in clis.iter().zip(&flows) {
            let (established, report) = match c.poll_connect(f) {
                Some(ConnectStatus::Established(r)) => (true, r),
                Some(ConnectStatus::Failed(r)) => (false, r),
                other => {
                    violations.push(format!("trial {trial}: connect did not finish ({other:?})"));
                    trial += 1;
                    continue;
                }
            };
            results.push(row![
                trial,
                c.engine().0,
                u8::from(established),
                report.attempts,
                u8::from(established && report.attempts == 1),
                report.finished_at - report.started_at,
                report.batch_sizes.iter().map(|&b| b as u64).sum::<u64>()
            ]);
            if established {
                c.close(f);
            }
            trial += 1;
        }
        tb.sim.advance(CLOSE_DRAIN_US);
        drain(&srv);
        clis.iter().for_each(|c| {
            drain(c);
        });
    }
    tb.sim.advance(CLOSE_DRAIN_US);
    drain(&srv);
    let mut channels: Vec<&Channel> = clis.iter().collect();
    channels.push(&srv);
    channels.iter().for_each(|c| {
        drain(c);
    });
    violations.extend(tb.audit(&channels));
    Ok(RunOutput { results, engines: tb.engine_table(), violations })
}
