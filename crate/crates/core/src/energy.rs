//! Duty-cycle energy model and battery lifetime.
//!
//! Average current is the sum, over the power states a node cycles through,
//! of the state's current times the fraction of wall time spent in it:
//!
//! ```text
//! EC = I_sleep·t_sleep + Σ I_sense,send,recv·t + Σ I_listen·t_listen
//! lifetime = capacity / EC
//! ```
//!
//! State currents are built from per-module draws ([`CurrentDraws`]). The
//! defaults are the datasheet values of a Waspmote Pro with an XBee ZigBee
//! PRO radio, an Events Sensor Board and an SD card.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::proto::{
    build_schedule, AppConfig, AppKind, ProtoError, LINK_ACK_PHY_BYTES, LISTEN_PHY_BYTES, SENSOR_DATA_EXTRA_READING_BYTES,
    SENSOR_DATA_PHY_BYTES,
};

/// The shipped current-draw profile; parses to [`CurrentDraws::default`].
pub const DEFAULT_PROFILE: &str = include_str!("../profiles/default.profile");

/// Battery shipped with the nodes, in mAh.
pub const DEFAULT_BATTERY_MAH: f64 = 6600.0;
/// Battery level under which OTA commands are not guaranteed, in percent.
pub const LOW_BATTERY_PCT: u8 = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("configuration has neither applications nor listening")]
    DegenerateConfig,
    #[error("activity fractions sum to {0}, more than the whole period")]
    Overcommitted(f64),
    #[error("energy rate is zero, lifetime is unbounded")]
    InfiniteLifetime,
    #[error("battery capacity must be positive, got {0}")]
    InvalidCapacity(f64),
    #[error("invalid current draws: {0}")]
    InvalidDraws(String),
    #[error("profile line {line}: {reason}")]
    Profile { line: usize, reason: String },
    #[error(transparent)]
    Schedule(#[from] ProtoError),
}

/// Current drawn by each hardware module in each mode, in mA.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentDraws {
    pub mote_on: f64,
    pub mote_sleep: f64,
    pub xbee_on: f64,
    pub xbee_sleep: f64,
    pub xbee_send: f64,
    pub xbee_recv: f64,
    pub board_min: f64,
    /// Connector plus sensor, per application.
    pub board_per_sensor: BTreeMap<AppKind, f64>,
    pub board_read_register: f64,
    pub sd_on: f64,
    pub sd_read: f64,
    pub sd_write: f64,
    pub sd_off: f64,
}

impl Default for CurrentDraws {
    fn default() -> Self {
        CurrentDraws {
            mote_on: 15.0,
            mote_sleep: 0.055,
            xbee_on: 45.56,
            xbee_sleep: 0.71,
            xbee_send: 105.0,
            xbee_recv: 50.46,
            board_min: 0.0036,
            board_per_sensor: BTreeMap::from([
                (AppKind::Temperature, 0.032 + 0.006),
                (AppKind::Humidity, 0.032 + 0.180),
                // connector draw is quoted as 32-64 uA; midpoint
                (AppKind::Luminosity, 0.048),
                (AppKind::Presence, 0.100),
            ]),
            board_read_register: 0.150,
            sd_on: 0.14,
            sd_read: 0.2,
            sd_write: 0.2,
            sd_off: 0.0,
        }
    }
}

const SCALAR_KEYS: [&str; 12] = [
    "mote_on",
    "mote_sleep",
    "xbee_on",
    "xbee_sleep",
    "xbee_send",
    "xbee_recv",
    "board_min",
    "board_read_register",
    "sd_on",
    "sd_read",
    "sd_write",
    "sd_off",
];

impl CurrentDraws {
    pub fn sensor(&self, kind: AppKind) -> f64 {
        self.board_per_sensor.get(&kind).copied().unwrap_or(0.0)
    }

    fn scalar_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "mote_on" => &mut self.mote_on,
            "mote_sleep" => &mut self.mote_sleep,
            "xbee_on" => &mut self.xbee_on,
            "xbee_sleep" => &mut self.xbee_sleep,
            "xbee_send" => &mut self.xbee_send,
            "xbee_recv" => &mut self.xbee_recv,
            "board_min" => &mut self.board_min,
            "board_read_register" => &mut self.board_read_register,
            "sd_on" => &mut self.sd_on,
            "sd_read" => &mut self.sd_read,
            "sd_write" => &mut self.sd_write,
            "sd_off" => &mut self.sd_off,
            _ => return None,
        })
    }

    fn scalar(&self, key: &str) -> f64 {
        let mut copy = self.clone();
        *copy.scalar_mut(key).expect("known key")
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        for key in SCALAR_KEYS {
            let v = self.scalar(key);
            if !v.is_finite() || v < 0.0 {
                return Err(EnergyError::InvalidDraws(format!("{key} = {v}")));
            }
        }
        for (kind, v) in &self.board_per_sensor {
            if !v.is_finite() || *v < 0.0 {
                return Err(EnergyError::InvalidDraws(format!("sensor.{} = {v}", kind.name())));
            }
        }
        if self.mote_sleep >= self.mote_on {
            return Err(EnergyError::InvalidDraws("mote_sleep must be below mote_on".into()));
        }
        if self.xbee_sleep >= self.xbee_on {
            return Err(EnergyError::InvalidDraws("xbee_sleep must be below xbee_on".into()));
        }
        Ok(())
    }

    /// Reads a `key = value` profile. Keys not present keep their default.
    pub fn parse_profile(text: &str) -> Result<Self, EnergyError> {
        let mut draws = CurrentDraws::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| EnergyError::Profile { line: n + 1, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| err(format!("not a number: {:?}", value.trim())))?;
            if let Some(name) = key.strip_prefix("sensor.") {
                let kind = AppKind::parse(name).ok_or_else(|| err(format!("unknown sensor {name:?}")))?;
                draws.board_per_sensor.insert(kind, value);
            } else {
                *draws
                    .scalar_mut(key)
                    .ok_or_else(|| err(format!("unknown key {key:?}")))? = value;
            }
        }
        draws.validate()?;
        Ok(draws)
    }

    pub fn to_profile(&self) -> String {
        let mut out = String::from("# module current draws, mA\n");
        for key in SCALAR_KEYS {
            let _ = writeln!(out, "{key} = {}", self.scalar(key));
        }
        for (kind, v) in &self.board_per_sensor {
            let _ = writeln!(out, "sensor.{} = {v}", kind.name());
        }
        out
    }
}

/// Whether the radio may sleep between activities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnergyRole {
    /// Radio always on.
    Router,
    /// Radio sleeps with the mote.
    EndDevice,
}

/// Timing constants of the activity model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityTiming {
    pub radio_rate_bps: f64,
    /// Duration of one sensing event (register read).
    pub sense_duration_s: f64,
    /// Length of the listen window opened by alarm2.
    pub listen_window_s: f64,
    /// Share of the listen window during which the radio draws its receive
    /// current; the rest is idle-on. Calibration constant.
    pub listen_rx_share: f64,
}

impl Default for ActivityTiming {
    fn default() -> Self {
        ActivityTiming {
            radio_rate_bps: 250_000.0,
            sense_duration_s: 0.020,
            listen_window_s: 1.0,
            listen_rx_share: 0.5,
        }
    }
}

impl ActivityTiming {
    pub fn airtime_s(&self, phy_bytes: usize) -> f64 {
        phy_bytes as f64 * 8.0 / self.radio_rate_bps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEnergyConfig {
    pub role: EnergyRole,
    pub apps: Vec<AppConfig>,
    /// Minutes between listen windows; `None` when the node never listens.
    pub listen_interval_min: Option<u32>,
    pub battery_capacity_mah: f64,
}

impl NodeEnergyConfig {
    pub fn new(role: EnergyRole, apps: Vec<AppConfig>, listen_interval_min: Option<u32>) -> Self {
        NodeEnergyConfig {
            role,
            apps,
            listen_interval_min,
            battery_capacity_mah: DEFAULT_BATTERY_MAH,
        }
    }

    pub fn with_capacity(mut self, mah: f64) -> Self {
        self.battery_capacity_mah = mah;
        self
    }
}

/// Fraction of wall time spent in each power state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DutyCycle {
    pub t_sleep: f64,
    pub t_sense: f64,
    pub t_send: f64,
    pub t_recv: f64,
    pub t_listen_window: f64,
    pub t_listen_send: f64,
    pub t_listen_ack: f64,
    /// Fraction of time each sensor is powered. Not a state of its own:
    /// periodic sensors are on only while sensing, presence is always on.
    pub sensor_on: BTreeMap<AppKind, f64>,
}

impl DutyCycle {
    /// Sum of all non-sleep state fractions.
    pub fn active(&self) -> f64 {
        self.t_sense + self.t_send + self.t_recv + self.t_listen_window + self.t_listen_send + self.t_listen_ack
    }

    pub fn total(&self) -> f64 {
        self.t_sleep + self.active()
    }
}

/// Current of every power state for one role, in mA.
#[derive(Debug, Clone, PartialEq)]
pub struct StateCurrents {
    pub sleep: f64,
    pub sense: f64,
    pub send: f64,
    pub recv: f64,
    pub listen_window: f64,
}

impl StateCurrents {
    pub fn new(role: EnergyRole, draws: &CurrentDraws, timing: &ActivityTiming) -> Self {
        let radio_idle = match role {
            EnergyRole::Router => draws.xbee_on,
            EnergyRole::EndDevice => draws.xbee_sleep,
        };
        let awake = draws.mote_on + draws.sd_on + draws.board_min;
        StateCurrents {
            sleep: draws.mote_sleep + radio_idle + draws.board_min + draws.sd_on,
            sense: awake + draws.xbee_on + draws.board_read_register,
            send: awake + draws.xbee_send,
            recv: awake + draws.xbee_recv,
            listen_window: awake + draws.xbee_on + timing.listen_rx_share * (draws.xbee_recv - draws.xbee_on),
        }
    }
}

pub fn duty_cycle_of(cfg: &NodeEnergyConfig) -> Result<DutyCycle, EnergyError> {
    duty_cycle_with(cfg, &ActivityTiming::default())
}

pub fn duty_cycle_with(cfg: &NodeEnergyConfig, timing: &ActivityTiming) -> Result<DutyCycle, EnergyError> {
    let listening = cfg.listen_interval_min.filter(|&m| m > 0);
    if cfg.apps.is_empty() && listening.is_none() {
        return Err(EnergyError::DegenerateConfig);
    }
    let mut d = DutyCycle::default();

    if cfg.apps.iter().any(|a| a.interval_s().is_some()) {
        let schedule = build_schedule(&cfg.apps)?;
        let hyper = schedule.hyperperiod() as f64;
        let events = &schedule.indices()[..schedule.events_per_cycle()];
        let ack = timing.airtime_s(LINK_ACK_PHY_BYTES);
        for mask in events {
            let apps = mask.apps();
            let frame = SENSOR_DATA_PHY_BYTES + SENSOR_DATA_EXTRA_READING_BYTES * (apps.len() - 1);
            d.t_sense += timing.sense_duration_s / hyper;
            d.t_send += timing.airtime_s(frame) / hyper;
            d.t_recv += ack / hyper;
            for kind in apps {
                *d.sensor_on.entry(kind).or_default() += timing.sense_duration_s / hyper;
            }
        }
    }
    if cfg.apps.iter().any(|a| a.kind() == AppKind::Presence) {
        d.sensor_on.insert(AppKind::Presence, 1.0);
    }
    if let Some(minutes) = listening {
        let period = minutes as f64 * 60.0;
        d.t_listen_window = timing.listen_window_s / period;
        d.t_listen_send = timing.airtime_s(LISTEN_PHY_BYTES) / period;
        d.t_listen_ack = timing.airtime_s(LINK_ACK_PHY_BYTES) / period;
    }

    let active = d.active();
    if active > 1.0 + 1e-9 {
        return Err(EnergyError::Overcommitted(active));
    }
    d.t_sleep = (1.0 - active).max(0.0);
    Ok(d)
}

/// Average current for a given duty cycle, in mA.
pub fn rate_from_duty(role: EnergyRole, duty: &DutyCycle, draws: &CurrentDraws, timing: &ActivityTiming) -> f64 {
    let s = StateCurrents::new(role, draws, timing);
    let states = s.sleep * duty.t_sleep
        + s.sense * duty.t_sense
        + s.send * (duty.t_send + duty.t_listen_send)
        + s.recv * (duty.t_recv + duty.t_listen_ack)
        + s.listen_window * duty.t_listen_window;
    let sensors: f64 = duty
        .sensor_on
        .iter()
        .map(|(kind, frac)| draws.sensor(*kind) * frac)
        .sum();
    states + sensors
}

/// Average current drawn by a node, in mA.
pub fn energy_rate(cfg: &NodeEnergyConfig, draws: &CurrentDraws) -> Result<f64, EnergyError> {
    let timing = ActivityTiming::default();
    let duty = duty_cycle_with(cfg, &timing)?;
    Ok(rate_from_duty(cfg.role, &duty, draws, &timing))
}

/// Average current, falling back to the sleep current for a node that
/// neither senses nor listens.
pub fn energy_rate_or_idle(cfg: &NodeEnergyConfig, draws: &CurrentDraws) -> Result<f64, EnergyError> {
    match energy_rate(cfg, draws) {
        Err(EnergyError::DegenerateConfig) => {
            Ok(StateCurrents::new(cfg.role, draws, &ActivityTiming::default()).sleep)
        }
        other => other,
    }
}

/// Days until the battery is empty.
pub fn lifetime(cfg: &NodeEnergyConfig, draws: &CurrentDraws) -> Result<f64, EnergyError> {
    if cfg.battery_capacity_mah.is_nan() || cfg.battery_capacity_mah <= 0.0 {
        return Err(EnergyError::InvalidCapacity(cfg.battery_capacity_mah));
    }
    let ec = energy_rate(cfg, draws)?;
    if ec <= 0.0 {
        return Err(EnergyError::InfiniteLifetime);
    }
    Ok(cfg.battery_capacity_mah / ec / 24.0)
}

/// Battery left after `elapsed_s` seconds at the node's average current.
pub fn drain(battery_mah: f64, cfg: &NodeEnergyConfig, draws: &CurrentDraws, elapsed_s: f64) -> Result<f64, EnergyError> {
    let ec = energy_rate_or_idle(cfg, draws)?;
    Ok(drain_at(battery_mah, ec, elapsed_s))
}

/// Battery left after drawing `current_ma` for `elapsed_s` seconds.
pub fn drain_at(battery_mah: f64, current_ma: f64, elapsed_s: f64) -> f64 {
    (battery_mah - current_ma * elapsed_s.max(0.0) / 3600.0).max(0.0)
}

/// Charge of one unscheduled sensing event (sense, send, link ack), in mAh.
pub fn event_charge_mah(role: EnergyRole, draws: &CurrentDraws, timing: &ActivityTiming, kind: AppKind) -> f64 {
    let s = StateCurrents::new(role, draws, timing);
    let sense = (s.sense + draws.sensor(kind) - s.sleep) * timing.sense_duration_s;
    let send = (s.send - s.sleep) * timing.airtime_s(SENSOR_DATA_PHY_BYTES);
    let ack = (s.recv - s.sleep) * timing.airtime_s(LINK_ACK_PHY_BYTES);
    (sense + send + ack).max(0.0) / 3600.0
}

/// Average current attributable to one application, in mA.
///
/// Periodic applications pay their sensor and register read while sensing
/// plus one data frame and link ack per sample. Presence pays its sensor's
/// constant draw.
pub fn app_contribution(app: &AppConfig, draws: &CurrentDraws, timing: &ActivityTiming) -> f64 {
    match app.interval_s() {
        None => draws.sensor(app.kind()),
        Some(interval) => {
            let per_event_mas = (draws.sensor(app.kind()) + draws.board_read_register) * timing.sense_duration_s
                + draws.xbee_send * timing.airtime_s(SENSOR_DATA_PHY_BYTES)
                + draws.xbee_recv * timing.airtime_s(LINK_ACK_PHY_BYTES);
            per_event_mas / interval as f64
        }
    }
}

/// Application kinds ordered from the most to the least energy hungry.
pub fn app_energy_rank(apps: &[AppConfig], draws: &CurrentDraws) -> Vec<AppKind> {
    let timing = ActivityTiming::default();
    let mut per_kind: BTreeMap<AppKind, f64> = BTreeMap::new();
    for app in apps {
        *per_kind.entry(app.kind()).or_default() += app_contribution(app, draws, &timing);
    }
    let mut ranked: Vec<(AppKind, f64)> = per_kind.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(k, _)| k).collect()
}
