use std::net::Ipv4Addr;

use lcdnet::channel::ConnectStatus;
use lcdnet::fabric::FabricConfig;
use lcdnet::handshake::SprayMode;
use lcdnet::{Channel, ChannelError, EnginePolicy, FlowHandle, HostConfig, QueueId, Simulation, Stack};

const CLIENT: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
const SERVER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);

fn sim(fabric: FabricConfig, engines: usize, mode: SprayMode) -> (Simulation, Stack, Stack) {
    let mut sim = Simulation::new(fabric).unwrap();
    let mut cfg = HostConfig::new(CLIENT, engines);
    cfg.engine.spray.mode = mode;
    let (_, client) = sim.add_host(cfg.clone()).unwrap();
    cfg.ip = SERVER;
    let (_, server) = sim.add_host(cfg).unwrap();
    client.init();
    server.init();
    (sim, client, server)
}

fn connect(sim: &mut Simulation, ch: &Channel, port: u16) -> (FlowHandle, ConnectStatus) {
    let flow = ch.connect_start(SERVER, port).unwrap();
    sim.run_while(10_000_000, |_| !matches!(ch.poll_connect(flow), Some(ConnectStatus::Pending)));
    (flow, ch.poll_connect(flow).unwrap())
}

#[test]
fn single_engine_handshake_is_three_frames_and_echo_works() {
    let (mut sim, client, server) = sim(FabricConfig::default(), 1, SprayMode::Naive);
    let srv = server.attach(EnginePolicy::RoundRobin).unwrap();
    srv.listen(7).unwrap();
    let cli = client.attach(EnginePolicy::RoundRobin).unwrap();
    sim.advance(100);
    let (flow, status) = connect(&mut sim, &cli, 7);
    let ConnectStatus::Established(report) = status else { panic!("{status:?}") };
    assert_eq!(report.attempts, 1);
    let c = sim.engine_stats(sim.host_ids()[0]);
    let s = sim.engine_stats(sim.host_ids()[1]);
    assert_eq!((c.syns_sent, s.synacks_sent, c.handshake_acks_sent), (1, 1, 1));

    cli.try_send(flow, &b"abc"[..]).unwrap();
    let mut got = None;
    sim.run_while(1_000_000, |_| {
        got = srv.recv(false, None).unwrap();
        got.is_some()
    });
    let req = got.unwrap();
    assert_eq!(&req.payload[..], b"abc");
    srv.try_send(req.flow, req.payload.clone()).unwrap();
    let mut reply = None;
    sim.run_while(1_000_000, |_| {
        reply = cli.recv(false, None).unwrap();
        reply.is_some()
    });
    assert_eq!(reply.unwrap(), lcdnet::Message { flow, payload: (&b"abc"[..]).into() });
    assert_eq!(sim.shared_nothing_violations(), 0);
}

#[test]
fn attach_rules() {
    let (_sim, client, _server) = sim(FabricConfig::default(), 4, SprayMode::Optimized);
    let fresh = {
        let mut s = Simulation::new(FabricConfig::default()).unwrap();
        s.add_host(HostConfig::new(Ipv4Addr::new(10, 9, 9, 9), 1)).unwrap().1
    };
    assert_eq!(fresh.attach(EnginePolicy::RoundRobin).unwrap_err(), ChannelError::NotInitialized);
    assert_eq!(client.attach(EnginePolicy::RoundRobin).unwrap().engine(), QueueId(0));
    assert_eq!(
        client.attach(EnginePolicy::Pinned(QueueId(9))).unwrap_err(),
        ChannelError::InvalidEngine { requested: 9, engines: 4 }
    );
    let a = client.attach(EnginePolicy::RoundRobin).unwrap();
    let b = client.attach(EnginePolicy::RoundRobin).unwrap();
    assert_ne!(a.id(), b.id());
    assert_eq!((a.engine(), b.engine()), (QueueId(1), QueueId(2)));
    a.listen(80).unwrap();
    assert_eq!(b.bind(80).unwrap_err(), ChannelError::PortInUse(80));
    assert_eq!(a.recv(false, None), Ok(None));
}

#[test]
fn connect_to_closed_port_fails_after_eight_attempts() {
    let (mut sim, client, _server) = sim(FabricConfig::default(), 4, SprayMode::Naive);
    let cli = client.attach(EnginePolicy::RoundRobin).unwrap();
    let (_, status) = connect(&mut sim, &cli, 99);
    let ConnectStatus::Failed(r) = status else { panic!("{status:?}") };
    assert_eq!(r.attempts, 8);
    assert_eq!(r.finished_at - r.started_at, 2_400_000);
    assert_eq!(r.batch_sizes, vec![47, 94, 188, 376, 752, 1504, 3008, 4096]);
}

#[test]
fn many_engines_establish_and_exchange() {
    for mode in [SprayMode::Naive, SprayMode::Optimized] {
        let (mut sim, client, server) = sim(FabricConfig { rng_seed: 3, ..Default::default() }, 4, mode);
        let srv = server.attach(EnginePolicy::Pinned(QueueId(2))).unwrap();
        srv.listen(9).unwrap();
        let clis: Vec<Channel> = (0..4).map(|_| client.attach(EnginePolicy::RoundRobin).unwrap()).collect();
        sim.advance(100);
        for cli in &clis {
            let (flow, status) = connect(&mut sim, cli, 9);
            assert!(matches!(status, ConnectStatus::Established(_)), "{mode:?} {status:?}");
            cli.try_send(flow, vec![7u8; 100_000]).unwrap();
        }
        let mut got = 0;
        sim.run_while(5_000_000, |_| {
            while let Ok(Some(m)) = srv.recv(false, None) {
                assert_eq!(m.payload.len(), 100_000);
                got += 1;
            }
            got == 4
        });
        assert_eq!(got, 4);
        assert_eq!(sim.shared_nothing_violations(), 0);
    }
}

fn pump_messages(sim: &mut Simulation, rx: &Channel, expect: usize, limit: u64) -> Vec<lcdnet::Message> {
    let mut got = Vec::new();
    sim.run_while(limit, |_| {
        while let Ok(Some(m)) = rx.recv(false, None) {
            got.push(m);
        }
        got.len() >= expect
    });
    got
}

#[test]
fn lossy_reordering_fabric_delivers_everything_in_order() {
    let fabric = FabricConfig {
        loss_probability: 0.02,
        reorder_probability: 0.05,
        delay_jitter_us: 3,
        rng_seed: 11,
        ..Default::default()
    };
    let (mut sim, client, server) = sim(fabric, 2, SprayMode::Optimized);
    let srv = server.attach(EnginePolicy::RoundRobin).unwrap();
    srv.listen(5).unwrap();
    let cli = client.attach(EnginePolicy::Pinned(QueueId(1))).unwrap();
    sim.advance(100);
    let (flow, status) = connect(&mut sim, &cli, 5);
    assert!(matches!(status, ConnectStatus::Established(_)));
    let sizes: Vec<usize> = (0..200).map(|i| 1 + (i * 7919) % 20_000).collect();
    for (i, &len) in sizes.iter().enumerate() {
        cli.try_send(flow, vec![i as u8; len]).unwrap();
    }
    let got = pump_messages(&mut sim, &srv, sizes.len(), 60_000_000);
    assert_eq!(got.len(), sizes.len());
    for (i, m) in got.iter().enumerate() {
        assert_eq!(m.payload.len(), sizes[i]);
        assert!(m.payload.iter().all(|&b| b == i as u8));
    }
    sim.advance(1_000_000);
    let (t, in_flight) = sim.transport_totals();
    assert_eq!(in_flight, 0);
    assert_eq!(t.data_frames_sent, t.acked_unique + in_flight + t.retransmissions);
    assert!(t.retransmissions > 0);
    assert!(sim.fabric().conserved());
}

#[test]
fn established_flows_steer_to_their_engines() {
    let (mut sim, client, server) = sim(FabricConfig { rng_seed: 5, ..Default::default() }, 8, SprayMode::Optimized);
    let srv = server.attach(EnginePolicy::Pinned(QueueId(6))).unwrap();
    srv.listen(1).unwrap();
    let clis: Vec<Channel> = (0..8).map(|_| client.attach(EnginePolicy::RoundRobin).unwrap()).collect();
    sim.advance(100);
    for cli in &clis {
        assert!(matches!(connect(&mut sim, cli, 1).1, ConnectStatus::Established(_)));
    }
    sim.advance(1_000);
    let hosts = sim.host_ids();
    let server_flows: Vec<_> = sim.engines(hosts[1]).iter().flat_map(|e| e.flows()).collect();
    assert_eq!(server_flows.len(), 8);
    for e in sim.engines(hosts[0]) {
        for f in e.flows() {
            let rx = lcdnet::wire::FourTuple { src_ip: SERVER, dst_ip: CLIENT, src_port: f.rx_udp.src, dst_port: f.rx_udp.dst };
            let tx = lcdnet::wire::FourTuple { src_ip: CLIENT, dst_ip: SERVER, src_port: f.tx_udp.src, dst_port: f.tx_udp.dst };
            assert_eq!(sim.fabric().oracle_queue(CLIENT, &rx), Some(f.engine));
            let peer = server_flows.iter().find(|s| s.key.ports.remote == f.key.ports.local).unwrap();
            assert_eq!(sim.fabric().oracle_queue(SERVER, &tx), Some(peer.engine));
            assert_eq!(peer.engine, QueueId(6));
            assert_eq!((peer.tx_udp, peer.rx_udp), (f.rx_udp, f.tx_udp));
        }
    }
}

#[test]
fn frame_for_another_engine_is_dropped_there() {
    let (mut sim, client, server) = sim(FabricConfig::default(), 2, SprayMode::Optimized);
    let srv = server.attach(EnginePolicy::Pinned(QueueId(1))).unwrap();
    srv.listen(3).unwrap();
    let cli = client.attach(EnginePolicy::RoundRobin).unwrap();
    sim.advance(100);
    let (flow, _) = connect(&mut sim, &cli, 3);
    cli.try_send(flow, &b"x"[..]).unwrap();
    assert_eq!(pump_messages(&mut sim, &srv, 1, 1_000_000).len(), 1);
    sim.advance(10_000);
    let hosts = sim.host_ids();
    let f = sim.engines(hosts[1])[1].flows()[0].clone();
    let before: Vec<_> = sim.engines(hosts[1]).iter().map(|e| e.stats().clone()).collect();

    let header = {
        let mut h = lcdnet::wire::WireHeader::new(lcdnet::wire::PacketType::Data, f.key.ports.remote, f.key.ports.local);
        h.seq = 1;
        h.msg_id = 1;
        h.msg_len = 1;
        h.flags = lcdnet::wire::FLAG_LAST_FRAGMENT;
        h
    };
    let tuple = lcdnet::wire::FourTuple { src_ip: CLIENT, dst_ip: SERVER, src_port: f.rx_udp.src, dst_port: f.rx_udp.dst };
    let frame = lcdnet::wire::build_frame([2, 0, 10, 0, 0, 1], &tuple, &header, b"y").unwrap();
    assert!(sim.inject_frame(hosts[1], QueueId(0), frame));
    sim.advance(100);
    let after = sim.engines(hosts[1]);
    assert_eq!(after[0].stats().misrouted, before[0].misrouted + 1);
    assert_eq!(after[1].stats().frames_rx, before[1].frames_rx);
    assert_eq!(srv.recv(false, None), Ok(None));
}

fn sim_with(fabric: FabricConfig, sack: bool) -> (Simulation, Channel, Channel, FlowHandle) {
    let mut sim = Simulation::new(fabric).unwrap();
    let mut cfg = HostConfig::new(CLIENT, 1);
    cfg.engine.transport.sack_enabled = sack;
    let (_, client) = sim.add_host(cfg.clone()).unwrap();
    cfg.ip = SERVER;
    let (_, server) = sim.add_host(cfg).unwrap();
    client.init();
    server.init();
    let srv = server.attach(EnginePolicy::RoundRobin).unwrap();
    srv.listen(4).unwrap();
    let cli = client.attach(EnginePolicy::RoundRobin).unwrap();
    sim.advance(100);
    let (flow, _) = connect(&mut sim, &cli, 4);
    // One exchange so both sides have heard from each other.
    cli.try_send(flow, &b"w"[..]).unwrap();
    pump_messages(&mut sim, &srv, 1, 1_000_000);
    sim.advance(50_000);
    (sim, cli, srv, flow)
}

fn is_data_seq(frame: &lcdnet::Frame, seq: u32) -> bool {
    lcdnet::wire::parse_frame(frame)
        .is_ok_and(|p| p.header.pkt_type == lcdnet::wire::PacketType::Data && p.header.seq == seq)
}

#[test]
fn single_loss_without_sack_recovers_after_one_rto() {
    let (mut sim, cli, srv, flow) = sim_with(FabricConfig::default(), false);
    let mut dropped = false;
    sim.fabric_mut().set_drop_filter(Some(Box::new(move |f| {
        let hit = !dropped && is_data_seq(f, 2);
        dropped |= hit;
        hit
    })));
    let start = sim.now();
    cli.try_send(flow, vec![9u8; 3 * 1408]).unwrap();
    let got = pump_messages(&mut sim, &srv, 1, 1_000_000);
    assert_eq!(got[0].payload.len(), 3 * 1408);
    let elapsed = sim.now() - start;
    assert!((10_000..10_200).contains(&elapsed), "{elapsed}");
    let (t, _) = sim.transport_totals();
    assert_eq!((t.rto_fires, t.retransmissions, t.fast_retransmits), (1, 1, 0));
    assert_eq!(sim.fabric().stats().frames_lost, 1);
}

#[test]
fn total_loss_after_establishment_resets_the_flow() {
    let (mut sim, cli, _srv, flow) = sim_with(FabricConfig::default(), true);
    sim.fabric_mut().set_loss_probability(1.0).unwrap();
    cli.try_send(flow, &b"gone"[..]).unwrap();
    let mut err = None;
    sim.run_while(60_000_000, |_| {
        err = cli.recv(false, None).err();
        err.is_some()
    });
    assert_eq!(err, Some(ChannelError::FlowReset(flow)));
    let (t, _) = sim.transport_totals();
    assert_eq!(t.retransmissions, 16);
    assert_eq!(cli.try_send(flow, &b"x"[..]), Err(ChannelError::FlowReset(flow)));
}

#[test]
fn lossless_run_never_times_out() {
    let (mut sim, cli, srv, flow) = sim_with(FabricConfig { delay_jitter_us: 4, rng_seed: 8, ..Default::default() }, true);
    let mut got = 0;
    for chunk in 0..10 {
        for i in 0..1000 {
            while cli.try_send(flow, vec![(chunk + i) as u8; 1 + i % 3000]).is_err() {
                sim.advance(10);
                while srv.recv(false, None).unwrap().is_some() {
                    got += 1;
                }
            }
        }
    }
    sim.run_while(10_000_000, |_| {
        while srv.recv(false, None).unwrap().is_some() {
            got += 1;
        }
        got == 10_000
    });
    assert_eq!(got, 10_000);
    let (t, _) = sim.transport_totals();
    assert_eq!(t.rto_fires, 0);
    // Jitter reorders frames, which may cost a few spurious fast retransmits.
    assert!(t.retransmissions * 100 < t.unique_fragments_sent, "{t:?}");
}

#[test]
fn close_tells_the_peer() {
    let (mut sim, client, server) = sim(FabricConfig::default(), 2, SprayMode::Optimized);
    let srv = server.attach(EnginePolicy::RoundRobin).unwrap();
    srv.listen(4).unwrap();
    let cli = client.attach(EnginePolicy::RoundRobin).unwrap();
    sim.advance(100);
    let (flow, _) = connect(&mut sim, &cli, 4);
    cli.try_send(flow, vec![1u8; 50_000]).unwrap();
    cli.close(flow);
    let got = pump_messages(&mut sim, &srv, 1, 1_000_000);
    assert_eq!(got[0].payload.len(), 50_000);
    let peer = got[0].flow;
    let mut closed = None;
    sim.run_while(1_000_000, |_| {
        if let Err(e) = srv.recv(false, None) {
            closed = Some(e);
        }
        closed.is_some()
    });
    assert_eq!(closed, Some(ChannelError::FlowClosed(peer)));
    assert_eq!(srv.try_send(peer, &b"late"[..]), Err(ChannelError::FlowClosed(peer)));
    assert_eq!(cli.try_send(flow, &b"late"[..]), Err(ChannelError::FlowClosed(flow)));
    sim.advance(100_000);
    let hosts = sim.host_ids();
    assert!(sim.engines(hosts[0]).iter().all(|e| e.flow_count() == 0));
    assert!(sim.engines(hosts[1]).iter().all(|e| e.flow_count() == 0));
}
