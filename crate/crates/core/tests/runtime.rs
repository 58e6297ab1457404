use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use lcdnet::fabric::FabricConfig;
use lcdnet::{Channel, EnginePolicy, HostConfig, Runtime};

const CLIENT: Ipv4Addr = Ipv4Addr::new(10, 1, 0, 1);
const SERVER: Ipv4Addr = Ipv4Addr::new(10, 1, 0, 2);

fn start() -> (Runtime, lcdnet::Stack, lcdnet::Stack) {
    let (rt, stacks) =
        Runtime::start(FabricConfig::default(), vec![HostConfig::new(CLIENT, 1), HostConfig::new(SERVER, 1)]).unwrap();
    for s in &stacks {
        s.init();
    }
    let mut it = stacks.into_iter();
    (rt, it.next().unwrap(), it.next().unwrap())
}

#[test]
fn blocked_receivers_wake_once_per_message() {
    let (rt, client, server) = start();
    let receivers: Vec<Arc<Channel>> = (0..4)
        .map(|i| {
            let ch = server.attach(EnginePolicy::RoundRobin).unwrap();
            ch.listen(100 + i).unwrap();
            Arc::new(ch)
        })
        .collect();
    let cli = client.attach(EnginePolicy::RoundRobin).unwrap();
    let flows: Vec<_> = (0..4).map(|i| cli.connect(SERVER, 100 + i, Duration::from_secs(10)).unwrap()).collect();

    let threads: Vec<_> = receivers
        .iter()
        .cloned()
        .map(|ch| {
            std::thread::spawn(move || {
                let mut got = 0;
                while got < 50 {
                    if ch.recv(true, Some(Duration::from_secs(10))).unwrap().is_some() {
                        got += 1;
                    }
                }
                got
            })
        })
        .collect();
    for i in 0..200 {
        cli.send(flows[i % 4], vec![i as u8; 16]).unwrap();
        std::thread::sleep(Duration::from_micros(200));
    }
    for t in threads {
        assert_eq!(t.join().unwrap(), 50);
    }
    for ch in &receivers {
        let s = ch.stats();
        assert_eq!(s.spins, 0);
        assert_eq!(s.enqueued, s.returned);
        assert!(s.wakeups <= s.returned);
    }
    rt.shutdown();
}

#[test]
fn blocking_recv_times_out_empty() {
    let (rt, _client, server) = start();
    let ch = server.attach(EnginePolicy::RoundRobin).unwrap();
    let t = std::time::Instant::now();
    assert_eq!(ch.recv(true, Some(Duration::from_millis(30))), Ok(None));
    assert!(t.elapsed() >= Duration::from_millis(30));
    assert_eq!(ch.stats().spins, 0);
    rt.shutdown();
}

#[test]
fn full_channel_blocks_the_sender() {
    let (rt, client, server) = start();
    let srv = server.attach(EnginePolicy::RoundRobin).unwrap();
    srv.listen(1).unwrap();
    let cli = Arc::new(client.attach(EnginePolicy::RoundRobin).unwrap());
    let flow = cli.connect(SERVER, 1, Duration::from_secs(10)).unwrap();
    let done = Arc::new(AtomicBool::new(false));
    let sender = {
        let (cli, done) = (cli.clone(), done.clone());
        std::thread::spawn(move || {
            for i in 0..5000u32 {
                cli.send(flow, i.to_be_bytes().to_vec()).unwrap();
            }
            done.store(true, Ordering::Release);
        })
    };
    // Stall the receiver until the sender is stuck.
    while cli.stats().send_blocked == 0 {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(!done.load(Ordering::Acquire));
    let mut next = 0u32;
    while next < 5000 {
        if let Some(m) = srv.recv(true, Some(Duration::from_secs(10))).unwrap() {
            assert_eq!(m.payload[..], next.to_be_bytes());
            next += 1;
        }
    }
    sender.join().unwrap();
    assert!(done.load(Ordering::Acquire));
    let s = cli.stats();
    assert!(s.tx_high_water <= lcdnet::channel::CHANNEL_CAPACITY as u64);
    assert_eq!(s.sent, 5000);
    let report = rt.shutdown();
    assert_eq!(report.engines.len(), 2);
}
