//! One-way transfer of mixed-size messages with content checks. Sizes are
//! log-uniform between the bounds; the first two messages are exactly the
//! bounds.

use lcdnet::{ChannelError, EnginePolicy};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::{RunOutput, Table};
use crate::scenario::{Scenario, TransferSpec};
use crate::testbed::{drain, Testbed};
use crate::{row, BenchError};

pub const PORT: u16 = 9;
const LIMIT_US: u64 = 36_000_000_000;
const LATE_DUPLICATE_WINDOW_US: u64 = 50_000;

pub const COLUMNS: &[&str] = &[
    "seed",
    "count",
    "bytes",
    "delivered",
    "mismatched",
    "extra",
    "elapsed_us",
    "data_frames",
    "retransmissions",
    "fast_retransmits",
    "rto_fires",
    "duplicate_data",
];

/// Message sizes for a run.
pub fn sizes(spec: &TransferSpec, seed: u64) -> Vec<usize> {
    let (lo, hi) = (spec.min_size.0 as f64, spec.max_size.0 as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5172e5);
    (0..spec.count)
        .map(|i| match i {
            0 => spec.min_size.0,
            1 => spec.max_size.0,
            _ => (rng.gen_range(lo.ln()..=hi.ln()).exp().round() as usize).clamp(spec.min_size.0, spec.max_size.0),
        })
        .collect()
}

/// Deterministic content of message `index`.
pub fn content(seed: u64, index: usize, len: usize) -> Vec<u8> {
    let mut buf = vec![0; len];
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64).fill_bytes(&mut buf);
    buf
}

pub fn run(sc: &Scenario, spec: &TransferSpec, seed: u64) -> Result<RunOutput, BenchError> {
    let mut tb = Testbed::new(sc, seed)?;
    let srv = tb.attach(tb.server, EnginePolicy::RoundRobin)?;
    srv.listen(PORT)?;
    let cli = tb.attach(tb.client, EnginePolicy::RoundRobin)?;
    tb.settle();
    let flow = tb.connect(&cli, PORT)?;

    let sizes = sizes(spec, seed);
    let (mut sent, mut delivered, mut mismatched) = (0, 0, 0);
    let mut failure = None;
    let start = tb.sim.now();
    tb.sim.run_while(LIMIT_US, |_| {
        while let Some(m) = srv.recv(false, None).transpose() {
            match m {
                Ok(m) if delivered < sizes.len() => {
                    if m.payload.len() != sizes[delivered] || m.payload[..] != content(seed, delivered, sizes[delivered])[..] {
                        mismatched += 1;
                    }
                    delivered += 1;
                }
                Ok(_) => delivered += 1,
                Err(e) => {
                    failure = Some(e);
                    return true;
                }
            }
        }
        while sent < sizes.len() && sent - delivered.min(sent) < spec.max_outstanding {
            match cli.try_send(flow, content(seed, sent, sizes[sent])) {
                Ok(()) => sent += 1,
                Err(ChannelError::Full) => break,
                Err(e) => {
                    failure = Some(e);
                    return true;
                }
            }
        }
        delivered >= sizes.len()
    });
    let elapsed = tb.sim.now() - start;
    if let Some(e) = failure {
        return Err(e.into());
    }
    tb.sim.advance(LATE_DUPLICATE_WINDOW_US);
    let extra = drain(&srv).len() + delivered.saturating_sub(sizes.len());
    drain(&cli);

    let mut violations = tb.audit(&[&srv, &cli]);
    if delivered < sizes.len() {
        violations.push(format!("only {delivered} of {} messages delivered", sizes.len()));
    }
    if mismatched != 0 {
        violations.push(format!("{mismatched} messages differ from what was sent"));
    }
    if extra != 0 {
        violations.push(format!("{extra} messages delivered more than once"));
    }
    let (t, _) = tb.sim.transport_totals();
    let mut results = Table::new(COLUMNS);
    results.push(row![
        seed,
        sizes.len(),
        sizes.iter().sum::<usize>(),
        delivered.min(sizes.len()),
        mismatched,
        extra,
        elapsed,
        t.data_frames_sent,
        t.retransmissions,
        t.fast_retransmits,
        t.rto_fires,
        t.duplicate_data
    ]);
    Ok(RunOutput { results, engines: tb.engine_table(), violations })
}
