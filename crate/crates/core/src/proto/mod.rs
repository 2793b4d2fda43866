//! Firmware codification, merged schedules and wire frames.

mod firmware;
mod frame;
mod schedule;

use thiserror::Error;

pub use firmware::{apps_of, firmware_of, AppKind, FirmwareId};
pub use frame::{
    decode_frame, encode_frame, phy_size, BatteryPct, Frame, FrameClass, MalformedFrame, LINK_ACK_PHY_BYTES,
    LISTEN_PHY_BYTES, MAX_IMAGE_BYTES, PHY_OVERHEAD_BYTES, SENSOR_DATA_EXTRA_READING_BYTES, SENSOR_DATA_PHY_BYTES,
};
pub use schedule::{build_schedule, minimal_intervals, AppConfig, Schedule, MAX_HYPERPERIOD_S, MAX_INTERVAL_S};


#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtoError {
    #[error("application set is empty")]
    EmptyAppSet,
    #[error("firmware id {0} outside 1..=15")]
    InvalidFirmwareId(u32),
    #[error("sensing interval {0} s outside 1..={max}", max = MAX_INTERVAL_S)]
    InvalidInterval(u32),
    #[error("{0} needs a sensing interval")]
    MissingInterval(AppKind),
    #[error("{0} is event driven and takes no interval")]
    UnexpectedInterval(AppKind),
    #[error("no periodic application to schedule")]
    NoPeriodicApps,
    #[error("hyperperiod {0} s exceeds {max} s", max = MAX_HYPERPERIOD_S)]
    HyperperiodTooLarge(u64),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("battery {0}% outside 0..=100")]
    InvalidBattery(u8),
}
