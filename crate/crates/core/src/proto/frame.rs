//! Wire frames exchanged between sensor nodes and the controller.
//!
//! Standard frames are ASCII fields separated by `#`:
//!
//! ```text
//! #INFO#APP:7#TEMP:5#HUM:10#LDR:15#LSTN:1
//! #DATA#TEMP:21.5#BAT:87
//! #LISTEN
//! #PROGOK
//! #KIND:STD | #KIND:OTA
//! #OTA#-send#FW:3#SIZE:79704
//! #OTA#-start_new_program#FW:3
//! #OTA#-delete_program#FW:3
//! ```
//!
//! Schedule updates use their own layout, gaps first then firing masks:
//!
//! ```text
//! 2|<5><5><5><5><5><5>|-|<7><1><3><5><3><1><7>|
//! ```
//!
//! Application fields always appear in temperature, humidity, luminosity,
//! presence order.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AppKind, FirmwareId, ProtoError, Schedule};

/// Largest firmware image a node can execute (its flash size).
pub const MAX_IMAGE_BYTES: u32 = 128 * 1024;

/// PHY size of a single-reading sensor data frame.
pub const SENSOR_DATA_PHY_BYTES: usize = 102;
/// Growth of a sensor data frame per extra reading.
pub const SENSOR_DATA_EXTRA_READING_BYTES: usize = 10;
/// PHY size of a link-layer acknowledgment.
pub const LINK_ACK_PHY_BYTES: usize = 49;
/// PHY size of a listen announcement.
pub const LISTEN_PHY_BYTES: usize = 87;
/// Header and trailer added to the encoded payload of any other frame.
pub const PHY_OVERHEAD_BYTES: usize = 21;

/// Remaining battery in percent, `0..=100`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BatteryPct(u8);

impl BatteryPct {
    pub fn new(pct: u8) -> Result<Self, ProtoError> {
        if pct <= 100 {
            Ok(BatteryPct(pct))
        } else {
            Err(ProtoError::InvalidBattery(pct))
        }
    }

    /// Rounds a remaining/capacity ratio to whole percent.
    pub fn from_ratio(remaining: f64, capacity: f64) -> Self {
        let pct = if capacity > 0.0 {
            (100.0 * remaining / capacity).round().clamp(0.0, 100.0)
        } else {
            0.0
        };
        BatteryPct(pct as u8)
    }

    pub const fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for BatteryPct {
    type Error = ProtoError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        BatteryPct::new(v)
    }
}

impl From<BatteryPct> for u8 {
    fn from(b: BatteryPct) -> u8 {
        b.0
    }
}

/// Which reception mode the next frame needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameClass {
    Standard,
    Ota,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    /// Announces the running firmware and its parameters after setup.
    Info {
        firmware: FirmwareId,
        /// Sorted by kind, then interval. Presence never appears.
        sensor_intervals: Vec<(AppKind, u32)>,
        listen_interval_min: u32,
    },
    /// Readings of the applications that fired, plus remaining battery.
    SensorData {
        readings: BTreeMap<AppKind, f64>,
        battery_pct: BatteryPct,
    },
    /// The node opens its listen window.
    Listen,
    /// Acknowledges an applied schedule update.
    ProgOk,
    ScheduleUpdate { schedule: Schedule },
    OtaSend { firmware: FirmwareId, size_bytes: u32 },
    OtaStart { firmware: FirmwareId },
    OtaDelete { firmware: FirmwareId },
    /// Tells the node how to receive the frame that follows.
    FrameKindNotice { class: FrameClass },
}

impl Frame {
    /// INFO frame with its interval list put in canonical order.
    pub fn info(firmware: FirmwareId, mut sensor_intervals: Vec<(AppKind, u32)>, listen_interval_min: u32) -> Frame {
        sensor_intervals.sort_unstable();
        sensor_intervals.dedup();
        Frame::Info {
            firmware,
            sensor_intervals,
            listen_interval_min,
        }
    }

    /// Short name used in event logs.
    pub fn name(&self) -> &'static str {
        match self {
            Frame::Info { .. } => "INFO",
            Frame::SensorData { .. } => "DATA",
            Frame::Listen => "LISTEN",
            Frame::ProgOk => "PROGOK",
            Frame::ScheduleUpdate { .. } => "SCHEDULE",
            Frame::OtaSend { .. } => "OTA_SEND",
            Frame::OtaStart { .. } => "OTA_START",
            Frame::OtaDelete { .. } => "OTA_DELETE",
            Frame::FrameKindNotice { .. } => "KIND",
        }
    }

    /// Reception class of this frame.
    pub fn class(&self) -> FrameClass {
        match self {
            Frame::OtaSend { .. } | Frame::OtaStart { .. } | Frame::OtaDelete { .. } => FrameClass::Ota,
            _ => FrameClass::Standard,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_frame(self)
    }

    pub fn encode_string(&self) -> String {
        let mut s = String::new();
        write_frame(self, &mut s).expect("writing to a String cannot fail");
        s
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_frame(self, f)
    }
}

fn write_frame<W: fmt::Write>(frame: &Frame, out: &mut W) -> fmt::Result {
    match frame {
        Frame::Info {
            firmware,
            sensor_intervals,
            listen_interval_min,
        } => {
            write!(out, "#INFO#APP:{firmware}")?;
            let mut sorted = sensor_intervals.clone();
            sorted.sort_unstable();
            for (kind, interval) in sorted {
                write!(out, "#{}:{}", kind.tag(), interval)?;
            }
            write!(out, "#LSTN:{listen_interval_min}")
        }
        Frame::SensorData {
            readings,
            battery_pct,
        } => {
            out.write_str("#DATA")?;
            for (kind, value) in readings {
                write!(out, "#{}:{}", kind.tag(), value)?;
            }
            write!(out, "#BAT:{}", battery_pct.get())
        }
        Frame::Listen => out.write_str("#LISTEN"),
        Frame::ProgOk => out.write_str("#PROGOK"),
        Frame::ScheduleUpdate { schedule } => {
            out.write_str("2|")?;
            for i in schedule.intervals() {
                write!(out, "<{i}>")?;
            }
            out.write_str("|-|")?;
            for ix in schedule.indices() {
                write!(out, "<{ix}>")?;
            }
            out.write_str("|")
        }
        Frame::OtaSend {
            firmware,
            size_bytes,
        } => write!(out, "#OTA#-send#FW:{firmware}#SIZE:{size_bytes}"),
        Frame::OtaStart { firmware } => write!(out, "#OTA#-start_new_program#FW:{firmware}"),
        Frame::OtaDelete { firmware } => write!(out, "#OTA#-delete_program#FW:{firmware}"),
        Frame::FrameKindNotice { class } => match class {
            FrameClass::Standard => out.write_str("#KIND:STD"),
            FrameClass::Ota => out.write_str("#KIND:OTA"),
        },
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    frame.encode_string().into_bytes()
}

/// Size of `frame` on the air, in bytes.
pub fn phy_size(frame: &Frame) -> usize {
    match frame {
        Frame::SensorData { readings, .. } => {
            SENSOR_DATA_PHY_BYTES + SENSOR_DATA_EXTRA_READING_BYTES * readings.len().saturating_sub(1)
        }
        Frame::Listen => LISTEN_PHY_BYTES,
        other => encode_frame(other).len() + PHY_OVERHEAD_BYTES,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed frame at byte {offset}: {reason}")]
pub struct MalformedFrame {
    pub offset: usize,
    pub reason: String,
}

fn malformed(offset: usize, reason: impl Into<String>) -> MalformedFrame {
    MalformedFrame {
        offset,
        reason: reason.into(),
    }
}

/// Parses one frame. Unknown tags, trailing data and out-of-range values are errors.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, MalformedFrame> {
    if bytes.is_empty() {
        return Err(malformed(0, "empty input"));
    }
    if let Some(pos) = bytes.iter().position(|b| !b.is_ascii() || b.is_ascii_control()) {
        return Err(malformed(pos, "non-printable byte"));
    }
    let text = std::str::from_utf8(bytes).map_err(|e| malformed(e.valid_up_to(), "invalid utf-8"))?;
    match bytes[0] {
        b'#' => decode_standard(text),
        b'2' => decode_schedule(text),
        _ => Err(malformed(0, "expected '#' or '2'")),
    }
}

struct Field<'a> {
    offset: usize,
    text: &'a str,
}

impl<'a> Field<'a> {
    fn key_value(&self) -> Result<(&'a str, &'a str, usize), MalformedFrame> {
        match self.text.split_once(':') {
            Some((k, v)) => Ok((k, v, self.offset + k.len() + 1)),
            None => Err(malformed(self.offset, format!("expected KEY:VALUE, got {:?}", self.text))),
        }
    }

    fn expect_key(&self, key: &str) -> Result<(&'a str, usize), MalformedFrame> {
        let (k, v, at) = self.key_value()?;
        if k != key {
            return Err(malformed(self.offset, format!("expected {key}, got {k}")));
        }
        Ok((v, at))
    }
}

fn parse_uint(text: &str, offset: usize) -> Result<u32, MalformedFrame> {
    if text.is_empty() {
        return Err(malformed(offset, "missing number"));
    }
    if !text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed(offset, format!("not an unsigned integer: {text:?}")));
    }
    if text.len() > 1 && text.starts_with('0') {
        return Err(malformed(offset, "leading zero"));
    }
    text.parse::<u32>()
        .map_err(|_| malformed(offset, format!("number out of range: {text}")))
}

fn parse_firmware(text: &str, offset: usize) -> Result<FirmwareId, MalformedFrame> {
    let raw = parse_uint(text, offset)?;
    u8::try_from(raw)
        .ok()
        .and_then(|v| FirmwareId::new(v).ok())
        .ok_or_else(|| malformed(offset, format!("firmware id {raw} outside 1..=15")))
}

fn decode_standard(text: &str) -> Result<Frame, MalformedFrame> {
    let mut fields = Vec::new();
    let mut offset = 1;
    for part in text[1..].split('#') {
        if part.is_empty() {
            return Err(malformed(offset, "empty field"));
        }
        fields.push(Field { offset, text: part });
        offset += part.len() + 1;
    }
    let head = &fields[0];
    let rest = &fields[1..];
    let no_more = |n: usize| -> Result<(), MalformedFrame> {
        match rest.get(n) {
            Some(f) => Err(malformed(f.offset, "unexpected trailing field")),
            None => Ok(()),
        }
    };
    let need = |n: usize| -> Result<&Field<'_>, MalformedFrame> {
        rest.get(n).ok_or_else(|| malformed(text.len(), "frame truncated"))
    };

    match head.text {
        "LISTEN" => {
            no_more(0)?;
            Ok(Frame::Listen)
        }
        "PROGOK" => {
            no_more(0)?;
            Ok(Frame::ProgOk)
        }
        "KIND:STD" | "KIND:OTA" => {
            no_more(0)?;
            let class = if head.text.ends_with("STD") {
                FrameClass::Standard
            } else {
                FrameClass::Ota
            };
            Ok(Frame::FrameKindNotice { class })
        }
        "INFO" => decode_info(rest, text.len()),
        "DATA" => decode_data(rest, text.len()),
        "OTA" => {
            let cmd = need(0)?;
            let (fw_text, fw_at) = need(1)?.expect_key("FW")?;
            let firmware = parse_firmware(fw_text, fw_at)?;
            match cmd.text {
                "-send" => {
                    let (size_text, size_at) = need(2)?.expect_key("SIZE")?;
                    let size_bytes = parse_uint(size_text, size_at)?;
                    if size_bytes == 0 || size_bytes > MAX_IMAGE_BYTES {
                        return Err(malformed(size_at, format!("image size {size_bytes} outside 1..={MAX_IMAGE_BYTES}")));
                    }
                    no_more(3)?;
                    Ok(Frame::OtaSend {
                        firmware,
                        size_bytes,
                    })
                }
                "-start_new_program" => {
                    no_more(2)?;
                    Ok(Frame::OtaStart { firmware })
                }
                "-delete_program" => {
                    no_more(2)?;
                    Ok(Frame::OtaDelete { firmware })
                }
                other => Err(malformed(cmd.offset, format!("unknown OTA command {other:?}"))),
            }
        }
        other => Err(malformed(head.offset, format!("unknown frame tag {other:?}"))),
    }
}

fn decode_info(rest: &[Field<'_>], end: usize) -> Result<Frame, MalformedFrame> {
    let first = rest.first().ok_or_else(|| malformed(end, "frame truncated"))?;
    let (fw_text, fw_at) = first.expect_key("APP")?;
    let firmware = parse_firmware(fw_text, fw_at)?;
    let last = rest.last().expect("nonempty");
    if rest.len() < 2 {
        return Err(malformed(end, "missing LSTN field"));
    }
    let (lstn_text, lstn_at) = last.expect_key("LSTN")?;
    let listen_interval_min = parse_uint(lstn_text, lstn_at)?;
    if listen_interval_min == 0 {
        return Err(malformed(lstn_at, "listen interval must be positive"));
    }

    let mut sensor_intervals: Vec<(AppKind, u32)> = Vec::new();
    for field in &rest[1..rest.len() - 1] {
        let (tag, value, at) = field.key_value()?;
        let kind = AppKind::from_tag(tag)
            .filter(|k| k.is_periodic())
            .ok_or_else(|| malformed(field.offset, format!("unknown sensor tag {tag:?}")))?;
        if !firmware.contains(kind) {
            return Err(malformed(field.offset, format!("{tag} not in firmware {firmware}")));
        }
        let interval = parse_uint(value, at)?;
        if interval == 0 || interval > super::MAX_INTERVAL_S {
            return Err(malformed(at, format!("sensing interval {interval} out of range")));
        }
        if let Some(prev) = sensor_intervals.last() {
            if *prev >= (kind, interval) {
                return Err(malformed(field.offset, "sensor fields out of order"));
            }
        }
        sensor_intervals.push((kind, interval));
    }
    for kind in firmware.apps().into_iter().filter(|k| k.is_periodic()) {
        if !sensor_intervals.iter().any(|(k, _)| *k == kind) {
            return Err(malformed(last.offset, format!("missing interval for {}", kind.tag())));
        }
    }
    Ok(Frame::Info {
        firmware,
        sensor_intervals,
        listen_interval_min,
    })
}

fn decode_data(rest: &[Field<'_>], end: usize) -> Result<Frame, MalformedFrame> {
    if rest.len() < 2 {
        return Err(malformed(end, "sensor data needs a reading and BAT"));
    }
    let last = rest.last().expect("nonempty");
    let (bat_text, bat_at) = last.expect_key("BAT")?;
    let raw = parse_uint(bat_text, bat_at)?;
    let battery_pct = u8::try_from(raw)
        .ok()
        .and_then(|v| BatteryPct::new(v).ok())
        .ok_or_else(|| malformed(bat_at, format!("battery {raw}% outside 0..=100")))?;

    let mut readings = BTreeMap::new();
    let mut prev: Option<AppKind> = None;
    for field in &rest[..rest.len() - 1] {
        let (tag, value, at) = field.key_value()?;
        let kind = AppKind::from_tag(tag)
            .ok_or_else(|| malformed(field.offset, format!("unknown sensor tag {tag:?}")))?;
        if prev.is_some_and(|p| p >= kind) {
            return Err(malformed(field.offset, "readings out of order"));
        }
        prev = Some(kind);
        let v: f64 = value
            .parse()
            .map_err(|_| malformed(at, format!("bad reading {value:?}")))?;
        if !v.is_finite() {
            return Err(malformed(at, "reading must be finite"));
        }
        readings.insert(kind, v);
    }
    Ok(Frame::SensorData {
        readings,
        battery_pct,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn eat(&mut self, lit: &str) -> Result<(), MalformedFrame> {
        if self.bytes[self.pos..].starts_with(lit.as_bytes()) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(malformed(self.pos, format!("expected {lit:?}")))
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Reads `<n><n>...` tokens until the next byte is not `<`.
    fn tokens(&mut self) -> Result<Vec<(u32, usize)>, MalformedFrame> {
        let mut out = Vec::new();
        while self.peek() == Some(b'<') {
            self.pos += 1;
            let start = self.pos;
            while self.peek().is_some_and(|b| b.is_ascii_digit()) {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
            let v = parse_uint(text, start)?;
            self.eat(">")?;
            out.push((v, start));
        }
        if out.is_empty() {
            return Err(malformed(self.pos, "expected at least one <n> token"));
        }
        Ok(out)
    }
}

fn decode_schedule(text: &str) -> Result<Frame, MalformedFrame> {
    let mut c = Cursor {
        bytes: text.as_bytes(),
        pos: 0,
    };
    c.eat("2|")?;
    let intervals = c.tokens()?;
    c.eat("|-|")?;
    let indices = c.tokens()?;
    c.eat("|")?;
    if c.pos != text.len() {
        return Err(malformed(c.pos, "unexpected trailing data"));
    }
    let mut ivals = Vec::with_capacity(intervals.len());
    for (v, at) in intervals {
        if v == 0 || v > super::MAX_INTERVAL_S {
            return Err(malformed(at, format!("interval {v} out of range")));
        }
        ivals.push(v);
    }
    let mut ids = Vec::with_capacity(indices.len());
    for (v, at) in indices {
        let fw = u8::try_from(v)
            .ok()
            .and_then(|v| FirmwareId::new(v).ok())
            .ok_or_else(|| malformed(at, format!("index {v} outside 1..=15")))?;
        ids.push(fw);
    }
    let schedule = Schedule::from_parts(ivals, ids).map_err(|e| malformed(0, e.to_string()))?;
    Ok(Frame::ScheduleUpdate { schedule })
}
