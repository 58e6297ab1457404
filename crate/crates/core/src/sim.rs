//! Drivers that wire hosts, engines and the fabric together.
//!
//! `Simulation` steps everything from one thread in virtual time and is
//! fully deterministic for a given seed. `Runtime` runs one thread per
//! engine plus a fabric thread against the wall clock.

use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::channel::Stack;
use crate::clock::VirtualClock;
use crate::engine::{Engine, EngineConfig, EngineStats, HostShared};
use crate::fabric::{Fabric, FabricConfig, FabricError, FabricStats, HostId};
use crate::lcd_nic::{Frame, LcdNic, Nic, NicConfig, NicError, QueueId};
use crate::transport::FlowStats;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Nic(#[from] NicError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostConfig {
    pub ip: Ipv4Addr,
    pub engines: usize,
    /// Queues the vNIC offers; `engines` may not exceed it.
    pub max_queues: usize,
    pub engine: EngineConfig,
}

impl HostConfig {
    pub fn new(ip: Ipv4Addr, engines: usize) -> Self {
        Self { ip, engines, max_queues: 64, engine: EngineConfig::default() }
    }
}

struct SimHost {
    id: HostId,
    nic: Arc<Nic>,
    engines: Vec<Engine>,
}

fn build_host(cfg: &HostConfig, seed: u64) -> Result<(Arc<Nic>, Arc<HostShared>, Vec<Engine>), SimError> {
    let nic = Arc::new(Nic::new(NicConfig::new(cfg.engines, cfg.max_queues, cfg.ip)?));
    let shared = Arc::new(HostShared::new(cfg.ip, cfg.engines as u16));
    let engine_seed = seed ^ (u32::from(cfg.ip) as u64).rotate_left(32);
    let engines = (0..cfg.engines)
        .map(|e| {
            let dyn_nic: Arc<dyn LcdNic> = nic.clone();
            Engine::new(QueueId(e as u16), dyn_nic, shared.clone(), cfg.engine.clone(), engine_seed)
        })
        .collect();
    Ok((nic, shared, engines))
}

/// Single-threaded, virtual-time driver.
pub struct Simulation {
    clock: VirtualClock,
    fabric: Fabric,
    hosts: Vec<SimHost>,
    seed: u64,
}

impl Simulation {
    pub fn new(fabric: FabricConfig) -> Result<Self, SimError> {
        let clock = VirtualClock::new();
        let seed = fabric.rng_seed;
        Ok(Self { fabric: Fabric::new(fabric, clock.clone())?, clock, hosts: Vec::new(), seed })
    }

    pub fn add_host(&mut self, cfg: HostConfig) -> Result<(HostId, Stack), SimError> {
        let (nic, shared, engines) = build_host(&cfg, self.seed)?;
        let id = self.fabric.attach_host(nic.clone())?;
        self.hosts.push(SimHost { id, nic, engines });
        Ok((id, Stack::new(shared)))
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn fabric_mut(&mut self) -> &mut Fabric {
        &mut self.fabric
    }

    pub fn engines(&self, host: HostId) -> &[Engine] {
        &self.hosts[host.0].engines
    }

    pub fn nic(&self, host: HostId) -> &Arc<Nic> {
        &self.hosts[host.0].nic
    }

    pub fn host_ids(&self) -> Vec<HostId> {
        self.hosts.iter().map(|h| h.id).collect()
    }

    /// Put a frame straight onto a host's RX queue, bypassing RSS.
    pub fn inject_frame(&mut self, host: HostId, queue: QueueId, frame: Frame) -> bool {
        self.hosts[host.0].nic.deliver_rx(queue, frame)
    }

    /// Run every engine that has work at the current instant until none
    /// does. Returns the work done.
    fn settle(&mut self) -> usize {
        let now = self.clock.now();
        let mut total = 0;
        loop {
            let mut work = 0;
            for host in &mut self.hosts {
                for engine in &mut host.engines {
                    if engine.next_wakeup(now, host.nic.rx_occupancy(engine.id()) > 0) == Some(now) {
                        work += engine.run_iteration(now);
                    }
                }
            }
            let moved = self.fabric.pump_tx() + self.fabric.deliver_due();
            total += work;
            if work == 0 && moved == 0 {
                return total;
            }
        }
    }

    fn next_event(&self) -> Option<u64> {
        let now = self.clock.now();
        let engines = self.hosts.iter().flat_map(|h| {
            h.engines.iter().filter_map(move |e| e.next_wakeup(now, h.nic.rx_occupancy(e.id()) > 0))
        });
        engines.chain(self.fabric.next_event_time()).min()
    }

    /// Time of the next thing that can happen after the current instant.
    /// Call after `settle`, which has already run everything runnable now.
    fn next_step(&self) -> Option<u64> {
        self.next_event().map(|t| t.max(self.clock.now() + 1))
    }

    /// Run until `deadline` (absolute virtual µs) or until nothing is left
    /// to do, whichever is first. Returns the work done.
    pub fn run_until(&mut self, deadline: u64) -> usize {
        let mut total = 0;
        loop {
            total += self.settle();
            match self.next_step() {
                Some(t) if t <= deadline => self.clock.set(t),
                _ => return total,
            }
        }
    }

    /// Advance virtual time by exactly `delta`, processing everything due.
    pub fn advance(&mut self, delta: u64) -> usize {
        let deadline = self.clock.now() + delta;
        let work = self.run_until(deadline);
        self.clock.set(deadline);
        work + self.settle()
    }

    /// Step until `done` holds or `limit` µs of virtual time pass.
    /// Returns whether `done` was met.
    pub fn run_while(&mut self, limit: u64, mut done: impl FnMut(&mut Self) -> bool) -> bool {
        let deadline = self.clock.now() + limit;
        loop {
            self.settle();
            if done(self) {
                return true;
            }
            match self.next_step() {
                Some(t) if t <= deadline => self.clock.set(t),
                _ => {
                    self.clock.set(deadline);
                    self.settle();
                    return done(self);
                }
            }
        }
    }

    /// Nothing in flight, queued or pending anywhere.
    pub fn is_quiet(&self) -> bool {
        self.fabric.in_flight() == 0
            && self.hosts.iter().all(|h| {
                h.engines.iter().all(|e| !e.has_local_work() && h.nic.rx_occupancy(e.id()) == 0)
            })
    }

    pub fn engine_stats(&self, host: HostId) -> EngineStats {
        let mut total = EngineStats::default();
        for e in &self.hosts[host.0].engines {
            total.add(e.stats());
        }
        total
    }

    /// Transport counters across every flow on every host, with the
    /// number of fragments still unacknowledged.
    pub fn transport_totals(&self) -> (FlowStats, u64) {
        let mut total = FlowStats::default();
        let mut in_flight = 0;
        for e in self.hosts.iter().flat_map(|h| &h.engines) {
            let (s, f) = e.transport_totals();
            total.data_frames_sent += s.data_frames_sent;
            total.unique_fragments_sent += s.unique_fragments_sent;
            total.acked_unique += s.acked_unique;
            total.retransmissions += s.retransmissions;
            total.fast_retransmits += s.fast_retransmits;
            total.rto_fires += s.rto_fires;
            total.messages_sent += s.messages_sent;
            total.messages_delivered += s.messages_delivered;
            total.duplicate_data += s.duplicate_data;
            total.out_of_window += s.out_of_window;
            total.protocol_errors += s.protocol_errors;
            total.acks_sent += s.acks_sent;
            total.data_frames_received += s.data_frames_received;
            in_flight += f;
        }
        (total, in_flight)
    }

    /// Shared-nothing audit: no flow handle was ever owned by two engines
    /// of a host, no channel was touched by more than one engine, and no
    /// live flow names a foreign engine.
    pub fn shared_nothing_violations(&self) -> usize {
        let mut violations = 0;
        for h in &self.hosts {
            let mut seen = std::collections::BTreeSet::new();
            for e in &h.engines {
                violations += e.foreign_flows();
                for f in e.touched_flows() {
                    if !seen.insert(*f) {
                        violations += 1;
                    }
                }
            }
        }
        violations
    }
}

/// Real-time driver: one thread per engine, one for the fabric.
pub struct Runtime {
    stop: Arc<AtomicBool>,
    engines: Vec<JoinHandle<(usize, Engine)>>,
    fabric: Option<JoinHandle<Fabric>>,
}

#[derive(Debug, Clone)]
pub struct RuntimeReport {
    pub fabric: FabricStats,
    /// Indexed by host, then engine.
    pub engines: Vec<Vec<EngineStats>>,
}

fn idle_pause(idle: &mut u32) {
    *idle += 1;
    if *idle < 64 {
        std::thread::yield_now();
    } else {
        std::thread::sleep(Duration::from_micros(20));
    }
}

impl Runtime {
    pub fn start(fabric_cfg: FabricConfig, hosts: Vec<HostConfig>) -> Result<(Self, Vec<Stack>), SimError> {
        let clock = VirtualClock::new();
        let mut fabric = Fabric::new(fabric_cfg.clone(), clock.clone())?;
        let stop = Arc::new(AtomicBool::new(false));
        let mut stacks = Vec::new();
        let mut threads = Vec::new();
        for (host_idx, cfg) in hosts.iter().enumerate() {
            let mut cfg = cfg.clone();
            cfg.engine.per_item_cost_us = 0;
            let (nic, shared, engines) = build_host(&cfg, fabric_cfg.rng_seed)?;
            fabric.attach_host(nic)?;
            stacks.push(Stack::new(shared));
            for mut engine in engines {
                let (stop, clock) = (stop.clone(), clock.clone());
                threads.push(std::thread::spawn(move || {
                    let mut idle = 0;
                    while !stop.load(Ordering::Acquire) {
                        if engine.run_iteration(clock.now()) == 0 {
                            idle_pause(&mut idle);
                        } else {
                            idle = 0;
                        }
                    }
                    (host_idx, engine)
                }));
            }
        }
        let fabric_stop = stop.clone();
        let fabric_thread = std::thread::spawn(move || {
            let start = Instant::now();
            let mut idle = 0;
            while !fabric_stop.load(Ordering::Acquire) {
                clock.set(start.elapsed().as_micros() as u64);
                if fabric.pump_tx() + fabric.deliver_due() == 0 {
                    idle_pause(&mut idle);
                } else {
                    idle = 0;
                }
            }
            fabric
        });
        Ok((Self { stop, engines: threads, fabric: Some(fabric_thread) }, stacks))
    }

    pub fn shutdown(mut self) -> RuntimeReport {
        self.stop.store(true, Ordering::Release);
        let mut per_host: Vec<Vec<EngineStats>> = Vec::new();
        for t in self.engines.drain(..) {
            let (host, engine) = t.join().expect("engine thread panicked");
            if per_host.len() <= host {
                per_host.resize(host + 1, Vec::new());
            }
            per_host[host].push(engine.stats().clone());
        }
        let fabric = self.fabric.take().unwrap().join().expect("fabric thread panicked");
        RuntimeReport { fabric: fabric.stats().clone(), engines: per_host }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
    }
}
