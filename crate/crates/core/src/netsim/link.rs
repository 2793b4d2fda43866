//! Link timing, OTA transfer model and throughput estimates.

use serde::{Deserialize, Serialize};

use super::topology::{NodeId, Topology};
use super::NetError;
use crate::proto::{FirmwareId, LINK_ACK_PHY_BYTES, PHY_OVERHEAD_BYTES};

/// Largest payload of one radio frame.
pub const FRAME_PAYLOAD_CAP: u32 = 81;
/// Length of an OTA start/delete command on the wire.
pub const OTA_COMMAND_BYTES: u32 = 19;

/// Firmware images with measured sizes: (id, frames, bytes).
pub const MEASURED_IMAGES: [(u8, u32, u32); 4] = [(1, 982, 74_080), (3, 1_058, 79_704), (7, 1_061, 79_754), (15, 1_071, 80_506)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub radio_rate_bps: f64,
    /// Fixed cost per OTA frame on top of wire time: flash write, host
    /// turnaround and acknowledgement handling.
    pub per_frame_overhead_ms: f64,
    /// Fixed cost of executing an OTA command at the node.
    pub command_overhead_ms: f64,
    /// Image bytes carried per OTA frame.
    pub ota_chunk_payload: u32,
    /// Frames a parent router holds for a sleeping end device.
    pub parent_buffer_cap: usize,
    /// Upper bound on application throughput imposed by the radio stack.
    pub throughput_ceiling_bps: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            radio_rate_bps: 250_000.0,
            per_frame_overhead_ms: 96.0,
            command_overhead_ms: 5.0,
            ota_chunk_payload: 75,
            parent_buffer_cap: 64,
            throughput_ceiling_bps: 35_000.0,
        }
    }
}

/// One OTA image push to a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferDescriptor {
    pub firmware: FirmwareId,
    pub size_bytes: u32,
    pub frame_count: u32,
    pub hop_count: u32,
}

impl TransferDescriptor {
    /// Bytes on the wire; every frame is padded to the payload cap.
    pub fn bytes_sent(&self) -> u64 {
        self.frame_count as u64 * FRAME_PAYLOAD_CAP as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferTiming {
    pub duration_s: f64,
    pub effective_rate_bps: f64,
    pub bytes_sent: u64,
}

/// Image size and frame count of a firmware.
///
/// Ids without a measured image use the size of the smallest measured image
/// that contains all of their applications.
pub fn image_of(firmware: FirmwareId) -> (u32, u32) {
    if let Some(&(_, frames, bytes)) = MEASURED_IMAGES.iter().find(|m| m.0 == firmware.get()) {
        return (bytes, frames);
    }
    let &(_, _, bytes) = MEASURED_IMAGES
        .iter()
        .find(|m| firmware.is_subset_of(FirmwareId::new(m.0).expect("valid id")))
        .expect("firmware 15 contains every application");
    (bytes, bytes.div_ceil(LinkModel::default().ota_chunk_payload))
}

pub fn image_size(firmware: FirmwareId) -> u32 {
    image_of(firmware).0
}

impl LinkModel {
    pub fn serial_s(&self, bytes: f64, bps: u32) -> f64 {
        bytes * 8.0 / bps as f64
    }

    pub fn radio_s(&self, bytes: f64) -> f64 {
        bytes * 8.0 / self.radio_rate_bps
    }

    /// Delivery delay of one frame along `path`: serial into the first radio,
    /// one radio hop per edge, serial out of the last radio.
    pub fn frame_delay_s(&self, topo: &Topology, path: &[NodeId], serial_bytes: usize, phy_bytes: usize) -> f64 {
        let (Some(first), Some(last)) = (path.first(), path.last()) else {
            return 0.0;
        };
        let hops = path.len().saturating_sub(1);
        let src = topo.serial_bps(*first).unwrap_or(1);
        let dst = topo.serial_bps(*last).unwrap_or(1);
        self.serial_s(serial_bytes as f64, src) + hops as f64 * self.radio_s(phy_bytes as f64) + self.serial_s(serial_bytes as f64, dst)
    }

    pub fn descriptor(&self, firmware: FirmwareId, hop_count: u32) -> TransferDescriptor {
        let (size_bytes, frame_count) = image_of(firmware);
        TransferDescriptor {
            firmware,
            size_bytes,
            frame_count,
            hop_count,
        }
    }

    /// Time to push an image, frame by frame, from the gateway serial port to
    /// the node's serial port.
    pub fn ota_transfer(&self, desc: &TransferDescriptor, src_serial_bps: u32, dst_serial_bps: u32) -> TransferTiming {
        let frame = FRAME_PAYLOAD_CAP as f64;
        let per_frame = self.serial_s(frame, src_serial_bps)
            + desc.hop_count as f64 * self.radio_s(frame)
            + self.serial_s(frame, dst_serial_bps)
            + self.per_frame_overhead_ms / 1000.0;
        let duration_s = desc.frame_count as f64 * per_frame;
        let bytes_sent = desc.bytes_sent();
        TransferTiming {
            duration_s,
            effective_rate_bps: bytes_sent as f64 * 8.0 / duration_s,
            bytes_sent,
        }
    }

    /// Image push from the coordinator to `dst` over the routed path.
    pub fn ota_transfer_to(
        &self,
        topo: &Topology,
        dst: NodeId,
        firmware: FirmwareId,
    ) -> Result<(TransferDescriptor, TransferTiming), NetError> {
        let src = topo.coordinator();
        let hops = topo.hops(src, dst)? as u32;
        let desc = self.descriptor(firmware, hops);
        let timing = self.ota_transfer(&desc, topo.serial_bps(src).unwrap_or(1), topo.serial_bps(dst).unwrap_or(1));
        Ok((desc, timing))
    }

    /// Time for a start or delete command to reach the node and execute.
    pub fn ota_command_s(&self, hop_count: u32, src_serial_bps: u32, dst_serial_bps: u32) -> f64 {
        let bytes = OTA_COMMAND_BYTES as f64;
        self.serial_s(bytes, src_serial_bps)
            + hop_count as f64 * self.radio_s(bytes)
            + self.serial_s(bytes, dst_serial_bps)
            + self.command_overhead_ms / 1000.0
    }

    /// Best-case application throughput between two nodes, in bit/s.
    ///
    /// Full-payload frames, each acknowledged per hop, with the serial legs at
    /// both ends.
    pub fn max_throughput(&self, topo: &Topology, src: NodeId, dst: NodeId) -> Result<f64, NetError> {
        let hops = topo.hops(src, dst)? as f64;
        let payload = FRAME_PAYLOAD_CAP as f64;
        let phy = payload + PHY_OVERHEAD_BYTES as f64;
        let per_frame = self.serial_s(payload, topo.serial_bps(src).unwrap_or(1))
            + hops * (self.radio_s(phy) + self.radio_s(LINK_ACK_PHY_BYTES as f64))
            + self.serial_s(payload, topo.serial_bps(dst).unwrap_or(1));
        Ok((payload * 8.0 / per_frame).min(self.throughput_ceiling_bps))
    }
}
