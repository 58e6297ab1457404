//! Blocking versus polling receive on real threads.
//!
//! `threads` receivers each own a server channel. The client spreads
//! `requests` messages over them. Blocking receivers should wake exactly
//! once per message; polling receivers burn empty polls instead. With
//! `interleavings > 0` a second phase hands single messages to one
//! receiver with random delays on both sides and counts receives that
//! only returned because their timeout expired.

use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use lcdnet::fabric::FabricConfig;
use lcdnet::sim::Runtime;
use lcdnet::{Channel, EnginePolicy, FlowHandle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::{RunOutput, Table};
use crate::scenario::{BlockingSpec, RecvMode, Scenario};
use crate::testbed::engine_table;
use crate::{row, BenchError};

const BASE_PORT: u16 = 300;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
const REQUEST_GAP: Duration = Duration::from_micros(50);
/// Upper bound of the random delay on either side of an interleaving.
const MAX_JITTER_US: u64 = 50;
const PAYLOAD: &[u8] = b"wake";

pub const COLUMNS: &[&str] =
    &["phase", "receiver", "mode", "messages", "wakeups", "spins", "empty_polls", "lost_wakeups", "elapsed_ms"];

fn spin_for(us: u64) {
    let until = Instant::now() + Duration::from_micros(us);
    while Instant::now() < until {
        std::hint::spin_loop();
    }
}

fn receive(ch: &Channel, mode: RecvMode, timeout: Duration) -> Option<lcdnet::Message> {
    match mode {
        RecvMode::Blocking => ch.recv(true, Some(timeout)).ok().flatten(),
        RecvMode::Polling => {
            let until = Instant::now() + timeout;
            loop {
                if let Ok(Some(m)) = ch.recv(false, None) {
                    return Some(m);
                }
                if Instant::now() >= until {
                    return None;
                }
                thread::yield_now();
            }
        }
    }
}

pub fn run(sc: &Scenario, spec: &BlockingSpec, seed: u64) -> Result<RunOutput, BenchError> {
    let fabric = FabricConfig { rng_seed: seed, ..sc.fabric.clone() };
    let (rt, stacks) = Runtime::start(fabric, sc.hosts.clone())?;
    stacks.iter().for_each(|s| s.init());
    let (client, server) = (&stacks[sc.client], &stacks[sc.server]);
    let timeout = Duration::from_millis(spec.timeout_ms);

    let receivers: Vec<Channel> = (0..spec.threads)
        .map(|i| {
            let ch = server.attach(EnginePolicy::RoundRobin)?;
            ch.listen(BASE_PORT + i as u16)?;
            Ok(ch)
        })
        .collect::<Result<_, BenchError>>()?;
    let cli = client.attach(EnginePolicy::RoundRobin)?;
    thread::sleep(Duration::from_millis(1));
    let flows: Vec<FlowHandle> = (0..spec.threads)
        .map(|i| cli.connect(server.local_ip(), BASE_PORT + i as u16, CONNECT_TIMEOUT))
        .collect::<Result<_, _>>()?;

    let mut results = Table::new(COLUMNS);
    let mut violations = Vec::new();
    let mode_label = match spec.mode {
        RecvMode::Blocking => "blocking",
        RecvMode::Polling => "polling",
    };

    let started = Instant::now();
    let counts: Vec<(Channel, usize)> = thread::scope(|s| {
        let handles: Vec<_> = receivers
            .into_iter()
            .enumerate()
            .map(|(i, ch)| {
                let expect = (spec.requests + spec.threads - 1 - i) / spec.threads;
                s.spawn(move || {
                    let mut got = 0;
                    while got < expect {
                        match receive(&ch, spec.mode, timeout) {
                            Some(_) => got += 1,
                            None => break,
                        }
                    }
                    (ch, got)
                })
            })
            .collect();
        for r in 0..spec.requests {
            if cli.send(flows[r % spec.threads], PAYLOAD).is_err() {
                break;
            }
            thread::sleep(REQUEST_GAP);
        }
        handles.into_iter().map(|h| h.join().expect("receiver panicked")).collect()
    });
    let elapsed_ms = started.elapsed().as_millis();
    let mut total = 0;
    for (i, (ch, got)) in counts.iter().enumerate() {
        let st = ch.stats();
        total += got;
        results.push(row![
            "requests",
            i,
            mode_label,
            got,
            st.wakeups,
            st.spins,
            st.empty_polls,
            0,
            elapsed_ms
        ]);
        if spec.mode == RecvMode::Blocking && st.spins != 0 {
            violations.push(format!("receiver {i} spun {} times", st.spins));
        }
    }
    if total != spec.requests {
        violations.push(format!("received {total} of {} requests", spec.requests));
    }

    if spec.interleavings > 0 {
        let ch = &counts[0].0;
        let before = ch.stats();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delays: Vec<(u64, u64)> =
            (0..spec.interleavings).map(|_| (rng.gen_range(0..=MAX_JITTER_US), rng.gen_range(0..=MAX_JITTER_US))).collect();
        let started = Instant::now();
        let (go_tx, go_rx) = mpsc::channel::<u64>();
        let (done_tx, done_rx) = mpsc::channel::<bool>();
        let lost = thread::scope(|s| {
            s.spawn(move || {
                while let Ok(delay) = go_rx.recv() {
                    spin_for(delay);
                    let t = Instant::now();
                    let got = receive(ch, spec.mode, timeout);
                    let lost = got.is_none() || t.elapsed() >= timeout;
                    if done_tx.send(lost).is_err() {
                        return;
                    }
                }
            });
            let mut lost = 0;
            for &(recv_delay, send_delay) in &delays {
                go_tx.send(recv_delay).expect("receiver alive");
                spin_for(send_delay);
                if cli.send(flows[0], PAYLOAD).is_err() {
                    lost += 1;
                    break;
                }
                if done_rx.recv().expect("receiver alive") {
                    lost += 1;
                }
            }
            drop(go_tx);
            lost
        });
        let after = ch.stats();
        results.push(row![
            "interleavings",
            0,
            mode_label,
            spec.interleavings,
            after.wakeups - before.wakeups,
            after.spins - before.spins,
            after.empty_polls - before.empty_polls,
            lost,
            started.elapsed().as_millis()
        ]);
        if lost != 0 {
            violations.push(format!("{lost} lost wakeups in {} interleavings", spec.interleavings));
        }
    }

    let mut channels: Vec<&Channel> = counts.iter().map(|(c, _)| c).collect();
    channels.push(&cli);
    for ch in &channels {
        while let Ok(Some(_)) | Err(_) = ch.recv(false, None) {}
        let st = ch.stats();
        if st.enqueued != st.returned {
            violations.push(format!("channel {} enqueued {} but returned {}", ch.id(), st.enqueued, st.returned));
        }
    }
    let report = rt.shutdown();
    let ips = stacks.iter().map(|s| s.local_ip());
    let engines = engine_table(ips.zip(report.engines));
    Ok(RunOutput { results, engines, violations })
}
