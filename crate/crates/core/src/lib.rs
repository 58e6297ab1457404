//! A message transport stack that needs nothing from the NIC beyond frame
//! I/O, one RX/TX queue pair per core, and opaque RSS.

pub mod channel;
pub mod clock;
pub mod engine;
pub mod fabric;
pub mod handshake;
pub mod lcd_nic;
pub mod sim;
pub mod transport;
pub mod wire;

pub use clock::VirtualClock;
pub use lcd_nic::{Frame, LcdNic, Nic, NicConfig, QueueId};
pub use channel::{Channel, ChannelError, FlowHandle, Message, Stack};
pub use engine::{EngineConfig, EnginePolicy};
pub use sim::{HostConfig, Runtime, Simulation};
