//! Per-node firmware state machine.
//!
//! A node runs at most one firmware at a time. Two RTC alarms drive it:
//! alarm1 fires at the sampling instants of the merged schedule, alarm2 opens
//! a short listen window every few minutes in which the controller may send
//! schedule updates and OTA commands. Handlers are pure with respect to the
//! outside world: they update the node and return the actions to carry out.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::energy::{
    energy_rate_or_idle, event_charge_mah, ActivityTiming, CurrentDraws, EnergyRole, NodeEnergyConfig,
    DEFAULT_BATTERY_MAH,
};
use crate::netsim::NodeId;
use crate::proto::{
    build_schedule, AppConfig, AppKind, BatteryPct, FirmwareId, Frame, FrameClass, ProtoError, Schedule,
    MAX_IMAGE_BYTES,
};

pub const LISTEN_WINDOW_MS: u64 = 1_000;
/// Time from an OTA start command to the new firmware's setup.
pub const RESTART_MS: u64 = 2_000;
/// Delay between setup (or a schedule change) and the first sample.
pub const SENSE_START_DELAY_MS: u64 = 1_000;
/// Interval given to every periodic application right after a restart.
pub const DEFAULT_INTERVAL_S: u32 = 60;
pub const DEFAULT_LISTEN_INTERVAL_MIN: u32 = 1;
pub const SD_MAX_IMAGES: usize = 16_000;
pub const SD_CAPACITY_BYTES: u64 = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sleeping,
    Sensing,
    Listening,
    Rebooting,
}

/// An armed alarm. `gen` changes whenever the alarm is moved, so stale
/// events for the old time can be recognised and dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timer {
    pub at_ms: u64,
    pub gen: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimerKind {
    Alarm1,
    Alarm2,
    WindowEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeAction {
    /// Frame for the controller.
    Send(Frame),
    /// An image transfer started; the network decides when it completes.
    BeginTransfer { firmware: FirmwareId, size_bytes: u32 },
    Deleted { firmware: FirmwareId },
    Restart { firmware: FirmwareId, at_ms: u64 },
    /// Something worth logging that is not an error.
    Note(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NodeError {
    #[error("frame arrived outside a listen window")]
    NotListening,
    #[error("node does not accept {0} frames")]
    UnexpectedFrame(&'static str),
    #[error("{got:?} frame without a matching kind notice (expected {expected:?})")]
    ClassMismatch {
        expected: Option<FrameClass>,
        got: FrameClass,
    },
    #[error("firmware {0} is not on the SD card")]
    UnknownFirmware(FirmwareId),
    #[error("SD card cannot hold {needed} more bytes ({used} of {capacity} used, {images} images)")]
    SdFull {
        needed: u64,
        used: u64,
        capacity: u64,
        images: usize,
    },
    #[error("image of {0} bytes exceeds program memory")]
    ImageTooLarge(u32),
    #[error("schedule for apps {schedule} does not match running firmware {running:?}")]
    ScheduleRejected {
        schedule: u8,
        running: Option<FirmwareId>,
    },
    #[error("firmware {0} lacks application {1}")]
    MissingApp(FirmwareId, AppKind),
    #[error("presence detected but the running firmware has no presence application")]
    PresenceNotRunning(Option<FirmwareId>),
    #[error("node is rebooting or receiving an image")]
    Busy,
    #[error(transparent)]
    Proto(#[from] ProtoError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub listen_interval_min: u32,
    pub battery_capacity_mah: f64,
    /// Initial charge, percent of capacity.
    pub battery_pct: u8,
    pub sd_capacity_bytes: u64,
    pub draws: CurrentDraws,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            listen_interval_min: DEFAULT_LISTEN_INTERVAL_MIN,
            battery_capacity_mah: DEFAULT_BATTERY_MAH,
            battery_pct: 100,
            sd_capacity_bytes: SD_CAPACITY_BYTES,
            draws: CurrentDraws::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    id: NodeId,
    role: EnergyRole,
    draws: CurrentDraws,
    timing: ActivityTiming,
    mode: Mode,
    running: Option<FirmwareId>,
    schedule: Option<Schedule>,
    /// Time of schedule offset zero.
    epoch_ms: u64,
    last_sense_ms: Option<u64>,
    listen_interval_min: u32,
    listen_anchor_ms: u64,
    window_until: Option<u64>,
    alarm1: Option<Timer>,
    alarm2: Option<Timer>,
    window_end: Option<Timer>,
    gen: u64,
    expecting: Option<FrameClass>,
    transfer: Option<(FirmwareId, u32)>,
    sd: BTreeMap<FirmwareId, u32>,
    sd_capacity_bytes: u64,
    capacity_mah: f64,
    battery_mah: f64,
    battery_at_ms: u64,
    current_ma: f64,
    violations: Vec<String>,
}

impl Node {
    /// An idle node with no firmware running. It only listens, starting one
    /// listen interval after `now_ms`.
    pub fn new(id: NodeId, role: EnergyRole, cfg: NodeConfig, now_ms: u64) -> Self {
        let capacity = cfg.battery_capacity_mah;
        let mut node = Node {
            id,
            role,
            draws: cfg.draws,
            timing: ActivityTiming::default(),
            mode: Mode::Sleeping,
            running: None,
            schedule: None,
            epoch_ms: now_ms,
            last_sense_ms: None,
            listen_interval_min: cfg.listen_interval_min.max(1),
            listen_anchor_ms: now_ms,
            window_until: None,
            alarm1: None,
            alarm2: None,
            window_end: None,
            gen: 0,
            expecting: None,
            transfer: None,
            sd: BTreeMap::new(),
            sd_capacity_bytes: cfg.sd_capacity_bytes,
            capacity_mah: capacity,
            battery_mah: capacity * cfg.battery_pct.min(100) as f64 / 100.0,
            battery_at_ms: now_ms,
            current_ma: 0.0,
            violations: Vec::new(),
        };
        node.arm_alarm2(now_ms);
        node.refresh_current();
        node
    }

    /// Puts an image on the SD card before deployment.
    pub fn preload(&mut self, firmware: FirmwareId, size_bytes: u32) -> Result<(), NodeError> {
        self.check_sd_room(firmware, size_bytes)?;
        self.sd.insert(firmware, size_bytes);
        Ok(())
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn role(&self) -> EnergyRole {
        self.role
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn running(&self) -> Option<FirmwareId> {
        self.running
    }

    pub fn schedule(&self) -> Option<&Schedule> {
        self.schedule.as_ref()
    }

    pub fn epoch_ms(&self) -> u64 {
        self.epoch_ms
    }

    pub fn listen_interval_min(&self) -> u32 {
        self.listen_interval_min
    }

    /// Minimal sensing intervals currently in effect.
    pub fn intervals(&self) -> Vec<(AppKind, u32)> {
        self.schedule.as_ref().map(Schedule::app_intervals).unwrap_or_default()
    }

    pub fn sd_images(&self) -> BTreeSet<FirmwareId> {
        self.sd.keys().copied().collect()
    }

    pub fn sd_used_bytes(&self) -> u64 {
        self.sd.values().map(|&b| b as u64).sum()
    }

    pub fn is_listening(&self) -> bool {
        self.mode == Mode::Listening
    }

    /// Rebooting or in the middle of an image transfer.
    pub fn is_busy(&self) -> bool {
        self.mode == Mode::Rebooting || self.transfer.is_some()
    }

    pub fn timer(&self, kind: TimerKind) -> Option<Timer> {
        match kind {
            TimerKind::Alarm1 => self.alarm1,
            TimerKind::Alarm2 => self.alarm2,
            TimerKind::WindowEnd => self.window_end,
        }
    }

    /// Average current at the present configuration, mA.
    pub fn current_ma(&self) -> f64 {
        self.current_ma
    }

    pub fn battery_mah(&self, now_ms: u64) -> f64 {
        let dt = now_ms.saturating_sub(self.battery_at_ms) as f64 / 1000.0;
        (self.battery_mah - self.current_ma * dt / 3600.0).max(0.0)
    }

    pub fn battery_pct(&self, now_ms: u64) -> BatteryPct {
        BatteryPct::from_ratio(self.battery_mah(now_ms), self.capacity_mah)
    }

    /// Overrides the remaining charge, e.g. to emulate a weak battery.
    pub fn set_battery_pct(&mut self, now_ms: u64, pct: u8) {
        self.battery_at_ms = now_ms;
        self.battery_mah = self.capacity_mah * pct.min(100) as f64 / 100.0;
    }

    fn settle(&mut self, now_ms: u64) {
        self.battery_mah = self.battery_mah(now_ms);
        self.battery_at_ms = self.battery_at_ms.max(now_ms);
    }

    fn refresh_current(&mut self) {
        let mut apps = self.schedule.as_ref().map(Schedule::app_configs).unwrap_or_default();
        if self.running.is_some_and(|f| f.contains(AppKind::Presence)) {
            apps.push(AppConfig::presence());
        }
        let cfg = NodeEnergyConfig::new(self.role, apps, Some(self.listen_interval_min)).with_capacity(self.capacity_mah);
        self.current_ma = energy_rate_or_idle(&cfg, &self.draws).unwrap_or(0.0);
    }

    fn set_timer(&mut self, kind: TimerKind, at_ms: Option<u64>) {
        let slot = match kind {
            TimerKind::Alarm1 => &mut self.alarm1,
            TimerKind::Alarm2 => &mut self.alarm2,
            TimerKind::WindowEnd => &mut self.window_end,
        };
        match at_ms {
            None => *slot = None,
            Some(at) if slot.is_some_and(|t| t.at_ms == at) => {}
            Some(at) => {
                self.gen += 1;
                *slot = Some(Timer { at_ms: at, gen: self.gen });
            }
        }
    }

    /// Next sampling instant not yet sensed and not before `now_ms`.
    fn arm_alarm1(&mut self, now_ms: u64) {
        let at = self.schedule.as_ref().map(|s| {
            let from = self.last_sense_ms.map_or(now_ms, |l| now_ms.max(l + 1));
            let elapsed_s = from.saturating_sub(self.epoch_ms).div_ceil(1000);
            self.epoch_ms + s.next_event_at_or_after(elapsed_s).0 * 1000
        });
        self.set_timer(TimerKind::Alarm1, at);
    }

    /// Next listen instant strictly after `now_ms`, on the listen lattice.
    fn arm_alarm2(&mut self, now_ms: u64) {
        let period = self.listen_interval_min as u64 * 60_000;
        let k = now_ms.saturating_sub(self.listen_anchor_ms) / period + 1;
        self.set_timer(TimerKind::Alarm2, Some(self.listen_anchor_ms + k * period));
    }

    fn emit(&mut self, frame: Frame) -> NodeAction {
        if self.mode == Mode::Sleeping {
            self.violations.push(format!("node {} sent {} while sleeping", self.id, frame.name()));
        }
        NodeAction::Send(frame)
    }

    fn reading(kind: AppKind, now_ms: u64) -> f64 {
        let k = now_ms / 60_000;
        match kind {
            AppKind::Temperature => (200 + k % 50) as f64 / 10.0,
            AppKind::Humidity => (900 + k % 40) as f64 / 20.0,
            AppKind::Luminosity => (300 + k % 100) as f64,
            AppKind::Presence => 1.0,
        }
    }

    /// Boots `firmware` from the SD card with the given application configs.
    ///
    /// Every periodic application of the firmware needs at least one config.
    /// Returns the INFO frame announcing the result.
    pub fn on_setup(&mut self, now_ms: u64, firmware: FirmwareId, configs: &[AppConfig]) -> Result<Frame, NodeError> {
        if !self.sd.contains_key(&firmware) {
            return Err(NodeError::UnknownFirmware(firmware));
        }
        for c in configs {
            if !firmware.contains(c.kind()) {
                return Err(NodeError::MissingApp(firmware, c.kind()));
            }
        }
        for kind in firmware.apps().into_iter().filter(|k| k.is_periodic()) {
            if !configs.iter().any(|c| c.kind() == kind) {
                return Err(ProtoError::MissingInterval(kind).into());
            }
        }
        let periodic: Vec<AppConfig> = configs.iter().copied().filter(|c| c.interval_s().is_some()).collect();
        let schedule = if periodic.is_empty() {
            None
        } else {
            Some(build_schedule(&periodic)?)
        };
        self.settle(now_ms);
        self.running = Some(firmware);
        self.schedule = schedule;
        self.mode = Mode::Sleeping;
        self.transfer = None;
        self.expecting = None;
        self.window_until = None;
        self.set_timer(TimerKind::WindowEnd, None);
        self.epoch_ms = now_ms + SENSE_START_DELAY_MS;
        self.last_sense_ms = None;
        self.listen_anchor_ms = now_ms;
        self.set_timer(TimerKind::Alarm2, None);
        self.arm_alarm2(now_ms);
        self.arm_alarm1(now_ms);
        self.refresh_current();
        Ok(Frame::info(firmware, self.intervals(), self.listen_interval_min))
    }

    /// Completes a restart into `firmware` with default intervals.
    pub fn on_restart(&mut self, now_ms: u64, firmware: FirmwareId) -> Result<Vec<NodeAction>, NodeError> {
        let configs: Vec<AppConfig> = firmware
            .apps()
            .into_iter()
            .map(|k| AppConfig::new(k, k.is_periodic().then_some(DEFAULT_INTERVAL_S)))
            .collect::<Result<_, _>>()?;
        let info = match self.on_setup(now_ms, firmware, &configs) {
            Ok(info) => info,
            Err(e) => {
                // Stay reachable so the controller can try again.
                self.mode = Mode::Sleeping;
                self.arm_alarm2(now_ms);
                return Err(e);
            }
        };
        self.mode = Mode::Sensing;
        let out = self.emit(info);
        self.mode = Mode::Sleeping;
        Ok(vec![out])
    }

    pub fn on_alarm1(&mut self, now_ms: u64) -> Vec<NodeAction> {
        self.settle(now_ms);
        if self.is_busy() {
            self.set_timer(TimerKind::Alarm1, None);
            return vec![NodeAction::Note("alarm1 skipped while busy".into())];
        }
        let Some(schedule) = &self.schedule else {
            self.set_timer(TimerKind::Alarm1, None);
            return Vec::new();
        };
        let elapsed_s = now_ms.saturating_sub(self.epoch_ms) / 1000;
        let (_, idx) = schedule.next_event_at_or_after(elapsed_s);
        let bits = schedule.indices()[idx];
        let readings = bits.apps().into_iter().map(|k| (k, Self::reading(k, now_ms))).collect();
        let frame = Frame::SensorData {
            readings,
            battery_pct: self.battery_pct(now_ms),
        };
        let prev = self.mode;
        self.mode = Mode::Sensing;
        let out = self.emit(frame);
        self.mode = prev;
        self.last_sense_ms = Some(now_ms);
        self.arm_alarm1(now_ms);
        vec![out]
    }

    pub fn on_alarm2(&mut self, now_ms: u64) -> Vec<NodeAction> {
        self.settle(now_ms);
        if self.is_busy() {
            self.set_timer(TimerKind::Alarm2, None);
            return vec![NodeAction::Note("alarm2 skipped while busy".into())];
        }
        self.mode = Mode::Listening;
        self.window_until = Some(now_ms + LISTEN_WINDOW_MS);
        self.set_timer(TimerKind::WindowEnd, Some(now_ms + LISTEN_WINDOW_MS));
        self.arm_alarm2(now_ms);
        vec![self.emit(Frame::Listen)]
    }

    pub fn on_window_end(&mut self, now_ms: u64) {
        self.set_timer(TimerKind::WindowEnd, None);
        if self.mode == Mode::Listening && self.transfer.is_none() {
            self.close_window(now_ms);
        }
    }

    fn close_window(&mut self, now_ms: u64) {
        self.mode = Mode::Sleeping;
        self.window_until = None;
        self.expecting = None;
        self.arm_alarm1(now_ms);
        self.arm_alarm2(now_ms);
    }

    pub fn on_frame(&mut self, now_ms: u64, frame: &Frame) -> Result<Vec<NodeAction>, NodeError> {
        self.settle(now_ms);
        if self.mode != Mode::Listening || self.transfer.is_some() {
            return Err(NodeError::NotListening);
        }
        if let Frame::FrameKindNotice { class } = frame {
            self.expecting = Some(*class);
            return Ok(Vec::new());
        }
        match frame {
            Frame::ScheduleUpdate { .. } | Frame::OtaSend { .. } | Frame::OtaStart { .. } | Frame::OtaDelete { .. } => {}
            other => return Err(NodeError::UnexpectedFrame(other.name())),
        }
        let expected = self.expecting.take();
        if expected != Some(frame.class()) {
            return Err(NodeError::ClassMismatch {
                expected,
                got: frame.class(),
            });
        }
        match frame {
            Frame::ScheduleUpdate { schedule } => {
                let running = self.running;
                if running.map(FirmwareId::periodic_bits) != Some(schedule.periodic_bits().get()) {
                    return Err(NodeError::ScheduleRejected {
                        schedule: schedule.periodic_bits().get(),
                        running,
                    });
                }
                self.schedule = Some(schedule.clone());
                self.epoch_ms = now_ms + SENSE_START_DELAY_MS;
                self.last_sense_ms = None;
                self.arm_alarm1(now_ms);
                self.refresh_current();
                Ok(vec![self.emit(Frame::ProgOk)])
            }
            &Frame::OtaSend { firmware, size_bytes } => {
                self.check_sd_room(firmware, size_bytes)?;
                self.transfer = Some((firmware, size_bytes));
                self.set_timer(TimerKind::Alarm1, None);
                self.set_timer(TimerKind::Alarm2, None);
                Ok(vec![NodeAction::BeginTransfer { firmware, size_bytes }])
            }
            &Frame::OtaStart { firmware } => {
                if !self.sd.contains_key(&firmware) {
                    return Err(NodeError::UnknownFirmware(firmware));
                }
                self.mode = Mode::Rebooting;
                self.expecting = None;
                self.window_until = None;
                for kind in [TimerKind::Alarm1, TimerKind::Alarm2, TimerKind::WindowEnd] {
                    self.set_timer(kind, None);
                }
                Ok(vec![NodeAction::Restart {
                    firmware,
                    at_ms: now_ms + RESTART_MS,
                }])
            }
            &Frame::OtaDelete { firmware } => {
                if self.sd.remove(&firmware).is_none() {
                    return Err(NodeError::UnknownFirmware(firmware));
                }
                if self.running == Some(firmware) {
                    self.running = None;
                    self.schedule = None;
                    self.last_sense_ms = None;
                    self.set_timer(TimerKind::Alarm1, None);
                    self.refresh_current();
                }
                Ok(vec![NodeAction::Deleted { firmware }])
            }
            _ => unreachable!("filtered above"),
        }
    }

    fn check_sd_room(&self, firmware: FirmwareId, size_bytes: u32) -> Result<(), NodeError> {
        if size_bytes > MAX_IMAGE_BYTES {
            return Err(NodeError::ImageTooLarge(size_bytes));
        }
        let replaced = self.sd.get(&firmware).copied();
        let used = self.sd_used_bytes() - replaced.unwrap_or(0) as u64;
        let images = self.sd.len() - replaced.is_some() as usize;
        if images >= SD_MAX_IMAGES || used + size_bytes as u64 > self.sd_capacity_bytes {
            return Err(NodeError::SdFull {
                needed: size_bytes as u64,
                used,
                capacity: self.sd_capacity_bytes,
                images,
            });
        }
        Ok(())
    }

    /// The image finished arriving; it is stored and the node goes back to
    /// its schedule. Sampling instants missed meanwhile are skipped.
    pub fn on_transfer_complete(&mut self, now_ms: u64, transfer_s: f64) -> Result<FirmwareId, NodeError> {
        let (firmware, size) = self.transfer.take().ok_or(NodeError::UnexpectedFrame("transfer completion"))?;
        self.settle(now_ms);
        // Radio receiving for the whole transfer instead of sleeping.
        let extra_ma = (self.draws.mote_on + self.draws.xbee_recv - self.draws.mote_sleep - self.draws.xbee_sleep).max(0.0);
        self.battery_mah = (self.battery_mah - extra_ma * transfer_s / 3600.0).max(0.0);
        self.sd.insert(firmware, size);
        if self.window_until.is_none_or(|w| w <= now_ms) {
            self.close_window(now_ms);
        } else {
            self.arm_alarm1(now_ms);
            self.arm_alarm2(now_ms);
        }
        Ok(firmware)
    }

    /// Presence sensor interrupt.
    pub fn on_pir(&mut self, now_ms: u64) -> Result<Vec<NodeAction>, NodeError> {
        self.settle(now_ms);
        if !self.running.is_some_and(|f| f.contains(AppKind::Presence)) {
            return Err(NodeError::PresenceNotRunning(self.running));
        }
        if self.is_busy() {
            return Err(NodeError::Busy);
        }
        let charge = event_charge_mah(self.role, &self.draws, &self.timing, AppKind::Presence);
        self.battery_mah = (self.battery_mah - charge).max(0.0);
        let frame = Frame::SensorData {
            readings: BTreeMap::from([(AppKind::Presence, 1.0)]),
            battery_pct: self.battery_pct(now_ms),
        };
        let prev = self.mode;
        self.mode = Mode::Sensing;
        let out = self.emit(frame);
        self.mode = prev;
        // Waking up disarms the RTC; put both alarms back where they were.
        self.arm_alarm1(now_ms);
        if self.mode != Mode::Listening {
            self.arm_alarm2(now_ms);
        }
        Ok(vec![out])
    }

    /// Local invariants; an empty list means the node is consistent.
    pub fn check(&self, now_ms: u64) -> Vec<String> {
        let mut out = self.violations.clone();
        let id = self.id;
        if let Some(f) = self.running {
            if !self.sd.contains_key(&f) {
                out.push(format!("node {id}: running firmware {f} not on SD"));
            }
            if let Some(s) = &self.schedule {
                if s.periodic_bits().get() != f.periodic_bits() {
                    out.push(format!("node {id}: schedule apps {} differ from firmware {f}", s.periodic_bits()));
                }
            }
        } else if self.schedule.is_some() {
            out.push(format!("node {id}: schedule without firmware"));
        }
        if self.sd.len() > SD_MAX_IMAGES || self.sd_used_bytes() > self.sd_capacity_bytes {
            out.push(format!("node {id}: SD over capacity"));
        }
        if let Some((f, size)) = self.sd.iter().find(|(_, &s)| s > MAX_IMAGE_BYTES) {
            out.push(format!("node {id}: image {f} of {size} bytes too large"));
        }
        if self.mode == Mode::Sleeping {
            for t in [self.alarm1, self.alarm2].into_iter().flatten() {
                if t.at_ms < now_ms {
                    out.push(format!("node {id}: sleeping with alarm in the past ({} < {now_ms})", t.at_ms));
                }
            }
            if self.alarm2.is_none() {
                out.push(format!("node {id}: sleeping with no listen alarm"));
            }
        }
        out
    }
}
