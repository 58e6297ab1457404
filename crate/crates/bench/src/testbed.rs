use std::net::Ipv4Addr;

use lcdnet::channel::ConnectStatus;
use lcdnet::engine::EngineStats;
use lcdnet::fabric::HostId;
use lcdnet::{Channel, ChannelError, EnginePolicy, FlowHandle, Simulation, Stack};

use crate::report::Table;
use crate::scenario::Scenario;
use crate::BenchError;

/// Longest any single connect may take, in virtual µs.
const CONNECT_LIMIT_US: u64 = 10_000_000;

/// Two or more hosts over a virtual-time fabric.
pub struct Testbed {
    pub sim: Simulation,
    pub stacks: Vec<Stack>,
    pub hosts: Vec<HostId>,
    pub client: usize,
    pub server: usize,
}

impl Testbed {
    pub fn new(sc: &Scenario, seed: u64) -> Result<Self, BenchError> {
        let mut fabric = sc.fabric.clone();
        fabric.rng_seed = seed;
        let mut sim = Simulation::new(fabric)?;
        let mut stacks = Vec::new();
        let mut hosts = Vec::new();
        for h in &sc.hosts {
            let (id, stack) = sim.add_host(h.clone())?;
            stack.init();
            hosts.push(id);
            stacks.push(stack);
        }
        Ok(Self { sim, stacks, hosts, client: sc.client, server: sc.server })
    }

    pub fn client(&self) -> &Stack {
        &self.stacks[self.client]
    }

    pub fn server(&self) -> &Stack {
        &self.stacks[self.server]
    }

    pub fn server_ip(&self) -> Ipv4Addr {
        self.server().local_ip()
    }

    pub fn attach(&self, host: usize, policy: EnginePolicy) -> Result<Channel, BenchError> {
        Ok(self.stacks[host].attach(policy)?)
    }

    /// Let control commands reach the engines.
    pub fn settle(&mut self) {
        self.sim.advance(100);
    }

    /// Connect and wait for the outcome.
    pub fn connect(&mut self, ch: &Channel, port: u16) -> Result<FlowHandle, BenchError> {
        let flow = ch.connect_start(self.server_ip(), port)?;
        self.sim.run_while(CONNECT_LIMIT_US, |_| !matches!(ch.poll_connect(flow), Some(ConnectStatus::Pending)));
        match ch.poll_connect(flow) {
            Some(ConnectStatus::Established(_)) => Ok(flow),
            Some(ConnectStatus::Failed(r)) => Err(ChannelError::ConnectFailed { attempts: r.attempts }.into()),
            _ => Err(ChannelError::Timeout.into()),
        }
    }

    /// Conservation and isolation checks at the end of a run. `channels`
    /// must already be drained.
    pub fn audit(&self, channels: &[&Channel]) -> Vec<String> {
        let mut v = Vec::new();
        let f = self.sim.fabric();
        if !f.conserved() {
            v.push(format!("fabric frames not conserved: {:?}", f.stats()));
        }
        let (t, in_flight) = self.sim.transport_totals();
        if !t.balanced(in_flight) {
            v.push(format!("transport counters unbalanced: {t:?}, in flight {in_flight}"));
        }
        for ch in channels {
            let s = ch.stats();
            if s.enqueued != s.returned {
                v.push(format!("channel {} enqueued {} but returned {}", ch.id(), s.enqueued, s.returned));
            }
        }
        let shared = self.sim.shared_nothing_violations();
        if shared != 0 {
            v.push(format!("{shared} shared-nothing violations"));
        }
        v
    }

    pub fn engine_table(&self) -> Table {
        engine_table(self.hosts.iter().enumerate().map(|(i, h)| {
            (self.stacks[i].local_ip(), self.sim.engines(*h).iter().map(|e| e.stats().clone()).collect())
        }))
    }
}

pub fn engine_table(hosts: impl IntoIterator<Item = (Ipv4Addr, Vec<EngineStats>)>) -> Table {
    let mut cols = vec!["host", "engine"];
    cols.extend(EngineStats::COLUMNS);
    let mut t = Table::new(&cols);
    for (ip, engines) in hosts {
        for (e, s) in engines.iter().enumerate() {
            let mut r = vec![ip.to_string(), e.to_string()];
            r.extend(s.values().iter().map(u64::to_string));
            t.push(r);
        }
    }
    t
}

/// Drain every queued item from a channel, ignoring close notices.
pub fn drain(ch: &Channel) -> Vec<lcdnet::Message> {
    let mut out = Vec::new();
    loop {
        match ch.recv(false, None) {
            Ok(Some(m)) => out.push(m),
            Ok(None) => return out,
            Err(_) => {}
        }
    }
}
