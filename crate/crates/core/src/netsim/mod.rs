//! Network model: topology, link timing, OTA transfers and the event-driven
//! simulation that ties nodes and the controller together.

mod engine;
mod link;
mod sim;
mod topology;

use thiserror::Error;

pub use engine::{EventLog, EventQueue, LogRecord};
pub use link::{
    image_of, image_size, LinkModel, TransferDescriptor, TransferTiming, FRAME_PAYLOAD_CAP, MEASURED_IMAGES,
    OTA_COMMAND_BYTES,
};
pub use sim::{Departure, EventKind, FrameCounts, FrameStatus, NodeSetup, SdPreload, SimConfig, SimEvent, Simulation};
pub use topology::{NodeId, NodeSpec, Role, Topology, TopologyBuilder, TopologyError, COORDINATOR_SERIAL_BPS, NODE_SERIAL_BPS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("no route from {src} to {dst}")]
    NoRoute { src: NodeId, dst: NodeId },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("event at {at_ms} ms scheduled before current time {now_ms} ms")]
    TimeReversal { now_ms: u64, at_ms: u64 },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("node {0} cannot be set up: {1}")]
    Setup(NodeId, String),
}
