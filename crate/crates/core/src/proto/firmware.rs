//! Application kinds and the bitmask codification of firmware images.
//!
//! Every combination of the four applications is compiled into its own
//! firmware image. The image identifier is the bitmask of the applications
//! it contains, so identifiers run from 1 (temperature only) to 15 (all four).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ProtoError;

/// One of the four monitoring applications a node can host.
///
/// The declaration order is the bit order of the firmware codification and
/// the field order of every textual frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppKind {
    Temperature,
    Humidity,
    Luminosity,
    /// Event driven; has no sensing interval.
    Presence,
}

impl AppKind {
    pub const ALL: [AppKind; 4] = [
        AppKind::Temperature,
        AppKind::Humidity,
        AppKind::Luminosity,
        AppKind::Presence,
    ];

    /// The three kinds that sample at a fixed interval.
    pub const PERIODIC: [AppKind; 3] = [AppKind::Temperature, AppKind::Humidity, AppKind::Luminosity];

    /// Bit of this application inside a [`FirmwareId`].
    pub const fn bit(self) -> u8 {
        match self {
            AppKind::Temperature => 1,
            AppKind::Humidity => 2,
            AppKind::Luminosity => 4,
            AppKind::Presence => 8,
        }
    }

    pub const fn is_periodic(self) -> bool {
        !matches!(self, AppKind::Presence)
    }

    /// Field tag used in textual frames.
    pub const fn tag(self) -> &'static str {
        match self {
            AppKind::Temperature => "TEMP",
            AppKind::Humidity => "HUM",
            AppKind::Luminosity => "LDR",
            AppKind::Presence => "PIR",
        }
    }

    pub fn from_tag(tag: &str) -> Option<AppKind> {
        AppKind::ALL.into_iter().find(|k| k.tag() == tag)
    }

    /// Lower-case name used in scenario files and reports.
    pub const fn name(self) -> &'static str {
        match self {
            AppKind::Temperature => "temperature",
            AppKind::Humidity => "humidity",
            AppKind::Luminosity => "luminosity",
            AppKind::Presence => "presence",
        }
    }

    /// Accepts the long name, the frame tag, or a short alias.
    pub fn parse(s: &str) -> Option<AppKind> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "temperature" | "temp" => Some(AppKind::Temperature),
            "humidity" | "hum" => Some(AppKind::Humidity),
            "luminosity" | "lum" | "ldr" => Some(AppKind::Luminosity),
            "presence" | "pir" => Some(AppKind::Presence),
            _ => None,
        }
    }
}

impl fmt::Display for AppKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifier of a firmware image, `1..=15`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct FirmwareId(u8);

impl FirmwareId {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 15;

    pub fn new(id: u8) -> Result<Self, ProtoError> {
        if (Self::MIN..=Self::MAX).contains(&id) {
            Ok(FirmwareId(id))
        } else {
            Err(ProtoError::InvalidFirmwareId(id as u32))
        }
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    /// All fifteen identifiers in ascending order.
    pub fn all() -> impl Iterator<Item = FirmwareId> {
        (Self::MIN..=Self::MAX).map(FirmwareId)
    }

    pub fn contains(self, kind: AppKind) -> bool {
        self.0 & kind.bit() != 0
    }

    pub fn apps(self) -> BTreeSet<AppKind> {
        AppKind::ALL.into_iter().filter(|k| self.contains(*k)).collect()
    }

    /// Bits of the periodic applications only; zero for presence-only images.
    pub fn periodic_bits(self) -> u8 {
        self.0 & 0b0111
    }

    pub fn has_periodic(self) -> bool {
        self.periodic_bits() != 0
    }

    /// True when every application of `self` is also in `other`.
    pub fn is_subset_of(self, other: FirmwareId) -> bool {
        self.0 & !other.0 == 0
    }

    /// Image with `kind` added.
    pub fn with(self, kind: AppKind) -> FirmwareId {
        FirmwareId(self.0 | kind.bit())
    }

    /// Image with `kind` removed, or `None` when nothing would remain.
    pub fn without(self, kind: AppKind) -> Option<FirmwareId> {
        let bits = self.0 & !kind.bit();
        (bits != 0).then_some(FirmwareId(bits))
    }
}

impl TryFrom<u8> for FirmwareId {
    type Error = ProtoError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        FirmwareId::new(v)
    }
}

impl From<FirmwareId> for u8 {
    fn from(f: FirmwareId) -> u8 {
        f.0
    }
}

impl fmt::Display for FirmwareId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Firmware image that runs exactly `apps`.
pub fn firmware_of<I>(apps: I) -> Result<FirmwareId, ProtoError>
where
    I: IntoIterator<Item = AppKind>,
{
    let bits = apps.into_iter().fold(0u8, |acc, k| acc | k.bit());
    if bits == 0 {
        return Err(ProtoError::EmptyAppSet);
    }
    Ok(FirmwareId(bits))
}

/// Applications compiled into firmware `id`.
pub fn apps_of(id: u32) -> Result<BTreeSet<AppKind>, ProtoError> {
    let id = u8::try_from(id).map_err(|_| ProtoError::InvalidFirmwareId(id))?;
    Ok(FirmwareId::new(id)?.apps())
}
