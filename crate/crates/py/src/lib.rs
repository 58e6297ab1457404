//! Python bindings: build a virtual-time testbed, open channels and move
//! messages from Python.
//!
//! ```python
//! import lcdnet_py as ln
//! sim = ln.Simulation(seed=1)
//! a = sim.add_host("10.0.0.1", 2)
//! b = sim.add_host("10.0.0.2", 2)
//! srv = b.attach(); srv.listen(7)
//! cli = a.attach()
//! flow = sim.connect(cli, "10.0.0.2", 7)
//! cli.send(flow, b"hi")
//! print(sim.recv(srv))
//! ```

use std::net::Ipv4Addr;

use lcdnet::channel::{ChannelError, ConnectStatus};
use lcdnet::engine::EngineStats;
use lcdnet::fabric::{toeplitz_hash as toeplitz, FabricConfig, FourTuple, RSS_KEY_LEN};
use lcdnet::handshake::{self, SprayMode};
use lcdnet::{EnginePolicy, FlowHandle, HostConfig, QueueId};
use pyo3::exceptions::{PyRuntimeError, PyTimeoutError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn ip(s: &str) -> PyResult<Ipv4Addr> {
    s.parse().map_err(|_| PyValueError::new_err(format!("not an IPv4 address: {s}")))
}

fn channel_err(e: ChannelError) -> PyErr {
    match e {
        ChannelError::Timeout => PyTimeoutError::new_err(e.to_string()),
        ChannelError::InvalidEngine { .. } | ChannelError::MessageSize(_) | ChannelError::ReservedPort(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Naive SYN batch for `n` engines per side.
#[pyfunction]
#[pyo3(signature = (n, p=0.95))]
fn required_batch_naive(n: u32, p: f64) -> PyResult<u32> {
    handshake::required_batch_naive(n, p).map_err(value_err)
}

/// Optimized batch as `(per_side_exact, per_side, total_floor)`.
#[pyfunction]
#[pyo3(signature = (n, p=0.95))]
fn required_batch_optimized(n: u32, p: f64) -> PyResult<(f64, u32, u32)> {
    let b = handshake::required_batch_optimized(n, p).map_err(value_err)?;
    Ok((b.per_side_exact, b.per_side, b.total_floor))
}

/// Toeplitz hash of an IPv4/UDP 4-tuple under a 40-byte key.
#[pyfunction]
fn toeplitz_hash(key: &[u8], src_ip: &str, dst_ip: &str, src_port: u16, dst_port: u16) -> PyResult<u32> {
    let key: &[u8; RSS_KEY_LEN] =
        key.try_into().map_err(|_| PyValueError::new_err(format!("key must be {RSS_KEY_LEN} bytes")))?;
    let tuple = FourTuple { src_ip: ip(src_ip)?, dst_ip: ip(dst_ip)?, src_port, dst_port };
    Ok(toeplitz(key, &tuple))
}

fn stats_dict<'py>(py: Python<'py>, s: &EngineStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in EngineStats::COLUMNS.iter().zip(s.values()) {
        d.set_item(*k, v)?;
    }
    Ok(d)
}

/// One host's network stack.
#[pyclass]
struct Stack {
    inner: lcdnet::Stack,
}

#[pymethods]
impl Stack {
    #[getter]
    fn local_ip(&self) -> String {
        self.inner.local_ip().to_string()
    }

    #[getter]
    fn num_engines(&self) -> u16 {
        self.inner.num_engines()
    }

    /// Open a channel, round-robin across engines unless `engine` is given.
    #[pyo3(signature = (engine=None))]
    fn attach(&self, engine: Option<u16>) -> PyResult<Channel> {
        let policy = engine.map_or(EnginePolicy::RoundRobin, |e| EnginePolicy::Pinned(QueueId(e)));
        self.inner.attach(policy).map(|inner| Channel { inner }).map_err(channel_err)
    }
}

/// A message channel bound to one engine.
#[pyclass]
struct Channel {
    inner: lcdnet::Channel,
}

#[pymethods]
impl Channel {
    #[getter]
    fn id(&self) -> u32 {
        self.inner.id()
    }

    #[getter]
    fn engine(&self) -> u16 {
        self.inner.engine().0
    }

    fn listen(&self, port: u16) -> PyResult<()> {
        self.inner.listen(port).map_err(channel_err)
    }

    /// Start a connect; drive the simulation and poll with `connect_status`.
    fn connect_start(&self, remote_ip: &str, port: u16) -> PyResult<u64> {
        self.inner.connect_start(ip(remote_ip)?, port).map(|f| f.0).map_err(channel_err)
    }

    /// "pending", "established", "failed" or None for an unknown handle.
    fn connect_status(&self, flow: u64) -> Option<&'static str> {
        self.inner.poll_connect(FlowHandle(flow)).map(|s| match s {
            ConnectStatus::Pending => "pending",
            ConnectStatus::Established(_) => "established",
            ConnectStatus::Failed(_) => "failed",
        })
    }

    /// Queue a message. Raises if the channel is full.
    fn send(&self, flow: u64, data: &[u8]) -> PyResult<()> {
        self.inner.try_send(FlowHandle(flow), data.to_vec()).map_err(channel_err)
    }

    /// Next message as `(flow, bytes)`, or None.
    fn recv<'py>(&self, py: Python<'py>) -> PyResult<Option<(u64, Bound<'py, PyBytes>)>> {
        let m = self.inner.recv(false, None).map_err(channel_err)?;
        Ok(m.map(|m| (m.flow.0, PyBytes::new(py, &m.payload))))
    }

    fn close(&self, flow: u64) {
        self.inner.close(FlowHandle(flow));
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.stats();
        let d = PyDict::new(py);
        d.set_item("sent", s.sent)?;
        d.set_item("enqueued", s.enqueued)?;
        d.set_item("returned", s.returned)?;
        d.set_item("spins", s.spins)?;
        d.set_item("empty_polls", s.empty_polls)?;
        d.set_item("wakeups", s.wakeups)?;
        Ok(d)
    }
}

/// Hosts, engines and a fabric driven in virtual time.
#[pyclass(unsendable)]
struct Simulation {
    sim: lcdnet::Simulation,
}

#[pymethods]
impl Simulation {
    #[new]
    #[pyo3(signature = (seed=0, loss=0.0, reorder=0.0, base_delay_us=10, jitter_us=0))]
    fn new(seed: u64, loss: f64, reorder: f64, base_delay_us: u64, jitter_us: u64) -> PyResult<Self> {
        let cfg = FabricConfig {
            loss_probability: loss,
            reorder_probability: reorder,
            base_delay_us,
            delay_jitter_us: jitter_us,
            rng_seed: seed,
            ..Default::default()
        };
        lcdnet::Simulation::new(cfg).map(|sim| Self { sim }).map_err(value_err)
    }

    /// Add an initialized host with `engines` engines.
    #[pyo3(signature = (ip_addr, engines, spray_mode="optimized"))]
    fn add_host(&mut self, ip_addr: &str, engines: usize, spray_mode: &str) -> PyResult<Stack> {
        let mut cfg = HostConfig::new(ip(ip_addr)?, engines);
        cfg.engine.spray.mode = match spray_mode {
            "naive" => SprayMode::Naive,
            "optimized" => SprayMode::Optimized,
            other => return Err(PyValueError::new_err(format!("unknown spray mode {other}"))),
        };
        let (_, stack) = self.sim.add_host(cfg).map_err(value_err)?;
        stack.init();
        Ok(Stack { inner: stack })
    }

    /// Virtual time in µs.
    #[getter]
    fn now(&self) -> u64 {
        self.sim.now()
    }

    fn advance(&mut self, us: u64) -> usize {
        self.sim.advance(us)
    }

    /// Connect and step until established. Raises on failure.
    #[pyo3(signature = (channel, remote_ip, port, limit_us=10_000_000))]
    fn connect(&mut self, channel: PyRef<'_, Channel>, remote_ip: &str, port: u16, limit_us: u64) -> PyResult<u64> {
        let ch = &channel.inner;
        self.sim.advance(100);
        let flow = ch.connect_start(ip(remote_ip)?, port).map_err(channel_err)?;
        self.sim.run_while(limit_us, |_| !matches!(ch.poll_connect(flow), Some(ConnectStatus::Pending)));
        match ch.poll_connect(flow) {
            Some(ConnectStatus::Established(_)) => Ok(flow.0),
            Some(ConnectStatus::Failed(r)) => Err(channel_err(ChannelError::ConnectFailed { attempts: r.attempts })),
            _ => Err(channel_err(ChannelError::Timeout)),
        }
    }

    /// Step until `channel` has a message, or return None after `limit_us`.
    #[pyo3(signature = (channel, limit_us=1_000_000))]
    fn recv<'py>(
        &mut self,
        py: Python<'py>,
        channel: PyRef<'_, Channel>,
        limit_us: u64,
    ) -> PyResult<Option<(u64, Bound<'py, PyBytes>)>> {
        let ch = &channel.inner;
        let mut got = None;
        let mut err = None;
        self.sim.run_while(limit_us, |_| match ch.recv(false, None) {
            Ok(Some(m)) => {
                got = Some(m);
                true
            }
            Ok(None) => false,
            Err(e) => {
                err = Some(e);
                true
            }
        });
        if let Some(e) = err {
            return Err(channel_err(e));
        }
        Ok(got.map(|m| (m.flow.0, PyBytes::new(py, &m.payload))))
    }

    fn engine_stats<'py>(&self, py: Python<'py>, host: usize) -> PyResult<Bound<'py, PyDict>> {
        let ids = self.sim.host_ids();
        let id = ids.get(host).ok_or_else(|| PyValueError::new_err(format!("no host {host}")))?;
        stats_dict(py, &self.sim.engine_stats(*id))
    }

    fn fabric_stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.sim.fabric().stats();
        let d = PyDict::new(py);
        d.set_item("frames_sent", s.frames_sent)?;
        d.set_item("frames_delivered", s.frames_delivered)?;
        d.set_item("frames_lost", s.frames_lost)?;
        d.set_item("frames_dropped_ring_full", s.frames_dropped_ring_full)?;
        d.set_item("frames_dropped_unroutable", s.frames_dropped_unroutable)?;
        d.set_item("delivered_per_queue", s.delivered_per_queue.clone())?;
        Ok(d)
    }

    /// Fabric conservation and transport balance both hold.
    fn balanced(&self) -> bool {
        let (t, in_flight) = self.sim.transport_totals();
        self.sim.fabric().conserved() && t.balanced(in_flight)
    }

    fn shared_nothing_violations(&self) -> usize {
        self.sim.shared_nothing_violations()
    }
}

#[pymodule]
pub fn lcdnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(required_batch_naive, m)?)?;
    m.add_function(wrap_pyfunction!(required_batch_optimized, m)?)?;
    m.add_function(wrap_pyfunction!(toeplitz_hash, m)?)?;
    m.add_class::<Simulation>()?;
    m.add_class::<Stack>()?;
    m.add_class::<Channel>()?;
    m.add("MAX_MESSAGE_LEN", lcdnet::wire::MAX_MESSAGE_LEN)?;
    m.add("FRAGMENT_PAYLOAD", lcdnet::wire::FRAGMENT_PAYLOAD)?;
    Ok(())
}
