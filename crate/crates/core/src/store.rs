//! Controller database: sensor registers, devices, firmware catalogue and
//! the images held on each node's SD card.
//!
//! Each table is an append-only JSON-lines file in the data directory. A
//! line either puts a row or deletes one by key; replaying the file rebuilds
//! the table. [`Store::compact`] rewrites every file with the live rows only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{image_size, NodeId};
use crate::proto::{minimal_intervals, AppKind, FirmwareId};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{table}: {reason}")]
    ForeignKeyViolation { table: &'static str, reason: String },
    #[error("firmware {firmware} already recorded on device {device}")]
    DuplicateSdEntry { device: NodeId, firmware: FirmwareId },
    #[error("no {table} row for {key}")]
    NotFound { table: &'static str, key: String },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("{path}:{line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterRow {
    pub id: u64,
    pub device_id: NodeId,
    pub firmware_id: FirmwareId,
    pub timestamp_ms: u64,
    pub readings: BTreeMap<AppKind, f64>,
    pub battery_pct: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRow {
    pub device_id: NodeId,
    pub battery_pct: u8,
    pub listen_interval_min: u32,
    /// Minimal intervals last reported or confirmed by the node.
    pub sensing_intervals: Vec<(AppKind, u32)>,
    pub firmware_id: Option<FirmwareId>,
}

impl DeviceRow {
    pub fn new(device_id: NodeId, battery_pct: u8, listen_interval_min: u32) -> Self {
        DeviceRow {
            device_id,
            battery_pct,
            listen_interval_min,
            sensing_intervals: Vec::new(),
            firmware_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirmwareRow {
    pub firmware_id: FirmwareId,
    pub temperature: bool,
    pub humidity: bool,
    pub luminosity: bool,
    pub presence: bool,
    pub image_bytes: u32,
}

impl FirmwareRow {
    pub fn of(firmware: FirmwareId) -> Self {
        FirmwareRow {
            firmware_id: firmware,
            temperature: firmware.contains(AppKind::Temperature),
            humidity: firmware.contains(AppKind::Humidity),
            luminosity: firmware.contains(AppKind::Luminosity),
            presence: firmware.contains(AppKind::Presence),
            image_bytes: image_size(firmware),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OtaFirmwareRow {
    pub firmware_ota_id: u64,
    pub device_id: NodeId,
    pub firmware_id: FirmwareId,
}

/// Filter for [`Store::query`]. Empty fields match everything; the time
/// range is inclusive.
#[derive(Debug, Clone, Default)]
pub struct RegisterQuery {
    pub device: Option<NodeId>,
    pub app: Option<AppKind>,
    pub from_ms: Option<u64>,
    pub to_ms: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum Record<R, K> {
    Put { row: R },
    Del { key: K },
}

const REGISTERS: &str = "registers.jsonl";
const DEVICES: &str = "devices.jsonl";
const FIRMWARES: &str = "firmwares.jsonl";
const OTA_FIRMWARES: &str = "ota_firmwares.jsonl";

#[derive(Debug, Default)]
pub struct Store {
    dir: Option<PathBuf>,
    registers: Vec<RegisterRow>,
    devices: BTreeMap<NodeId, DeviceRow>,
    firmwares: BTreeMap<FirmwareId, FirmwareRow>,
    ota: BTreeMap<u64, OtaFirmwareRow>,
    next_ota_id: u64,
}

fn replay<R: DeserializeOwned, K: DeserializeOwned>(path: &Path, mut apply: impl FnMut(Record<R, K>)) -> Result<(), StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: n + 1,
            source,
        })?;
        apply(rec);
    }
    Ok(())
}

impl Store {
    /// Store without a backing directory; nothing is persisted.
    pub fn in_memory() -> Self {
        let mut s = Store {
            next_ota_id: 1,
            ..Store::default()
        };
        for f in FirmwareId::all() {
            s.firmwares.insert(f, FirmwareRow::of(f));
        }
        s
    }

    /// Opens (creating if needed) the store in `dir` and replays its tables.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut s = Store {
            dir: Some(dir.clone()),
            next_ota_id: 1,
            ..Store::default()
        };
        replay::<RegisterRow, u64>(&dir.join(REGISTERS), |r| match r {
            Record::Put { row } => s.registers.push(row),
            Record::Del { key } => s.registers.retain(|x| x.id != key),
        })?;
        replay::<DeviceRow, NodeId>(&dir.join(DEVICES), |r| match r {
            Record::Put { row } => {
                s.devices.insert(row.device_id, row);
            }
            Record::Del { key } => {
                s.devices.remove(&key);
            }
        })?;
        replay::<FirmwareRow, FirmwareId>(&dir.join(FIRMWARES), |r| match r {
            Record::Put { row } => {
                s.firmwares.insert(row.firmware_id, row);
            }
            Record::Del { key } => {
                s.firmwares.remove(&key);
            }
        })?;
        replay::<OtaFirmwareRow, u64>(&dir.join(OTA_FIRMWARES), |r| match r {
            Record::Put { row } => {
                s.next_ota_id = s.next_ota_id.max(row.firmware_ota_id + 1);
                s.ota.insert(row.firmware_ota_id, row);
            }
            Record::Del { key } => {
                s.ota.remove(&key);
            }
        })?;
        if s.firmwares.is_empty() {
            for f in FirmwareId::all() {
                let row = FirmwareRow::of(f);
                s.append(FIRMWARES, &Record::<_, FirmwareId>::Put { row: &row })?;
                s.firmwares.insert(f, row);
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn append<T: Serialize>(&self, table: &str, record: &T) -> Result<(), StoreError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let mut line = serde_json::to_string(record).expect("rows serialize");
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join(table))?;
        f.write_all(line.as_bytes())?;
        Ok(())
    }

    fn require_device(&self, table: &'static str, device: NodeId) -> Result<(), StoreError> {
        if self.devices.contains_key(&device) {
            Ok(())
        } else {
            Err(StoreError::ForeignKeyViolation {
                table,
                reason: format!("device {device} is not registered"),
            })
        }
    }

    fn require_firmware(&self, table: &'static str, firmware: FirmwareId) -> Result<(), StoreError> {
        if self.firmwares.contains_key(&firmware) {
            Ok(())
        } else {
            Err(StoreError::ForeignKeyViolation {
                table,
                reason: format!("firmware {firmware} is not catalogued"),
            })
        }
    }

    pub fn insert_register(
        &mut self,
        device: NodeId,
        firmware: FirmwareId,
        timestamp_ms: u64,
        readings: BTreeMap<AppKind, f64>,
        battery_pct: u8,
    ) -> Result<u64, StoreError> {
        self.require_device("registers", device)?;
        self.require_firmware("registers", firmware)?;
        let row = RegisterRow {
            id: self.registers.last().map_or(1, |r| r.id + 1),
            device_id: device,
            firmware_id: firmware,
            timestamp_ms,
            readings,
            battery_pct,
        };
        self.append(REGISTERS, &Record::<_, u64>::Put { row: &row })?;
        let id = row.id;
        self.registers.push(row);
        Ok(id)
    }

    pub fn upsert_device(&mut self, mut row: DeviceRow) -> Result<(), StoreError> {
        if let Some(f) = row.firmware_id {
            self.require_firmware("devices", f)?;
        }
        row.sensing_intervals = minimal_intervals(&row.sensing_intervals);
        self.append(DEVICES, &Record::<_, NodeId>::Put { row: &row })?;
        self.devices.insert(row.device_id, row);
        Ok(())
    }

    pub fn device(&self, id: NodeId) -> Option<&DeviceRow> {
        self.devices.get(&id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceRow> {
        self.devices.values()
    }

    pub fn firmware(&self, id: FirmwareId) -> Option<&FirmwareRow> {
        self.firmwares.get(&id)
    }

    pub fn firmwares(&self) -> impl Iterator<Item = &FirmwareRow> {
        self.firmwares.values()
    }

    /// Records that `firmware` is now on `device`'s SD card.
    pub fn record_sd_contents(&mut self, device: NodeId, firmware: FirmwareId) -> Result<u64, StoreError> {
        self.require_device("ota_firmwares", device)?;
        self.require_firmware("ota_firmwares", firmware)?;
        if self.ota.values().any(|r| r.device_id == device && r.firmware_id == firmware) {
            return Err(StoreError::DuplicateSdEntry { device, firmware });
        }
        let row = OtaFirmwareRow {
            firmware_ota_id: self.next_ota_id,
            device_id: device,
            firmware_id: firmware,
        };
        self.append(OTA_FIRMWARES, &Record::<_, u64>::Put { row: &row })?;
        self.next_ota_id += 1;
        self.ota.insert(row.firmware_ota_id, row);
        Ok(self.next_ota_id - 1)
    }

    pub fn remove_sd_entry(&mut self, device: NodeId, firmware: FirmwareId) -> Result<(), StoreError> {
        let key = self
            .ota
            .values()
            .find(|r| r.device_id == device && r.firmware_id == firmware)
            .map(|r| r.firmware_ota_id)
            .ok_or_else(|| StoreError::NotFound {
                table: "ota_firmwares",
                key: format!("device {device} firmware {firmware}"),
            })?;
        self.append(OTA_FIRMWARES, &Record::<OtaFirmwareRow, u64>::Del { key })?;
        self.ota.remove(&key);
        Ok(())
    }

    pub fn sd_contents(&self, device: NodeId) -> BTreeSet<FirmwareId> {
        self.ota
            .values()
            .filter(|r| r.device_id == device)
            .map(|r| r.firmware_id)
            .collect()
    }

    pub fn registers(&self) -> &[RegisterRow] {
        &self.registers
    }

    /// Matching registers in timestamp order.
    pub fn query(&self, q: &RegisterQuery) -> Vec<&RegisterRow> {
        let mut out: Vec<&RegisterRow> = self
            .registers
            .iter()
            .filter(|r| q.device.is_none_or(|d| r.device_id == d))
            .filter(|r| q.app.is_none_or(|a| r.readings.contains_key(&a)))
            .filter(|r| q.from_ms.is_none_or(|t| r.timestamp_ms >= t))
            .filter(|r| q.to_ms.is_none_or(|t| r.timestamp_ms <= t))
            .collect();
        out.sort_by_key(|r| (r.timestamp_ms, r.id));
        out
    }

    /// Full scan of every referential and uniqueness rule.
    pub fn validate(&self) -> Result<(), StoreError> {
        let fail = |m: String| Err(StoreError::Integrity(m));
        for (i, r) in self.registers.iter().enumerate() {
            if r.id != i as u64 + 1 {
                return fail(format!("register ids not contiguous at {}", r.id));
            }
            if !self.devices.contains_key(&r.device_id) {
                return fail(format!("register {} references unknown device {}", r.id, r.device_id));
            }
            if !self.firmwares.contains_key(&r.firmware_id) {
                return fail(format!("register {} references unknown firmware {}", r.id, r.firmware_id));
            }
        }
        for d in self.devices.values() {
            if d.firmware_id.is_some_and(|f| !self.firmwares.contains_key(&f)) {
                return fail(format!("device {} runs unknown firmware", d.device_id));
            }
        }
        let mut seen = BTreeSet::new();
        for r in self.ota.values() {
            if !self.devices.contains_key(&r.device_id) || !self.firmwares.contains_key(&r.firmware_id) {
                return fail(format!("sd entry {} has a dangling reference", r.firmware_ota_id));
            }
            if !seen.insert((r.device_id, r.firmware_id)) {
                return fail(format!("duplicate sd entry {}", r.firmware_ota_id));
            }
        }
        Ok(())
    }

    /// Rewrites every table file with only the live rows. Ids of deleted
    /// rows above the highest live id may be handed out again afterwards.
    pub fn compact(&self) -> Result<(), StoreError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        fn rewrite<'a, R: Serialize + 'a>(dir: &Path, name: &str, rows: impl Iterator<Item = &'a R>) -> Result<(), StoreError> {
            let tmp = dir.join(format!("{name}.tmp"));
            let mut out = String::new();
            for row in rows {
                out.push_str(&serde_json::to_string(&Record::<_, ()>::Put { row }).expect("rows serialize"));
                out.push('\n');
            }
            fs::write(&tmp, out)?;
            fs::rename(tmp, dir.join(name))?;
            Ok(())
        }
        rewrite(dir, REGISTERS, self.registers.iter())?;
        rewrite(dir, DEVICES, self.devices.values())?;
        rewrite(dir, FIRMWARES, self.firmwares.values())?;
        rewrite(dir, OTA_FIRMWARES, self.ota.values())?;
        Ok(())
    }

    /// Registers as CSV, one line per reading.
    pub fn monitor_csv(&self, q: &RegisterQuery) -> String {
        let mut out = String::from("timestamp_ms,device_id,firmware_id,app,value,battery_pct\n");
        for r in self.query(q) {
            for (kind, value) in &r.readings {
                if q.app.is_some_and(|a| a != *kind) {
                    continue;
                }
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.timestamp_ms,
                    r.device_id,
                    r.firmware_id,
                    kind.name(),
                    value,
                    r.battery_pct
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fw(id: u8) -> FirmwareId {
        FirmwareId::new(id).unwrap()
    }

    fn temp(v: f64) -> BTreeMap<AppKind, f64> {
        BTreeMap::from([(AppKind::Temperature, v)])
    }

    #[test]
    fn seeded_catalogue() {
        let s = Store::in_memory();
        assert_eq!(s.firmwares().count(), 15);
        let row = s.firmware(fw(9)).unwrap();
        assert!(row.temperature && row.presence && !row.humidity && !row.luminosity);
        assert_eq!(s.firmware(fw(3)).unwrap().image_bytes, 79_704);
    }

    #[test]
    fn foreign_keys_and_duplicates() {
        let mut s = Store::in_memory();
        assert!(matches!(
            s.insert_register(NodeId(1), fw(1), 0, temp(20.0), 90),
            Err(StoreError::ForeignKeyViolation { .. })
        ));
        s.upsert_device(DeviceRow::new(NodeId(1), 90, 1)).unwrap();
        s.insert_register(NodeId(1), fw(1), 0, temp(20.0), 90).unwrap();
        s.record_sd_contents(NodeId(1), fw(3)).unwrap();
        assert!(matches!(s.record_sd_contents(NodeId(1), fw(3)), Err(StoreError::DuplicateSdEntry { .. })));
        assert!(matches!(s.record_sd_contents(NodeId(2), fw(3)), Err(StoreError::ForeignKeyViolation { .. })));
        s.remove_sd_entry(NodeId(1), fw(3)).unwrap();
        assert!(matches!(s.remove_sd_entry(NodeId(1), fw(3)), Err(StoreError::NotFound { .. })));
        s.validate().unwrap();
    }

    #[test]
    fn persists_and_compacts() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path()).unwrap();
            let mut d = DeviceRow::new(NodeId(4), 80, 1);
            d.firmware_id = Some(fw(1));
            d.sensing_intervals = vec![(AppKind::Temperature, 10), (AppKind::Temperature, 5)];
            s.upsert_device(d).unwrap();
            s.record_sd_contents(NodeId(4), fw(1)).unwrap();
            s.record_sd_contents(NodeId(4), fw(3)).unwrap();
            s.remove_sd_entry(NodeId(4), fw(3)).unwrap();
            for t in 0..5 {
                s.insert_register(NodeId(4), fw(1), t * 1000, temp(20.0 + t as f64), 80).unwrap();
            }
        }
        let s = Store::open(dir.path()).unwrap();
        assert_eq!(s.firmwares().count(), 15);
        assert_eq!(s.device(NodeId(4)).unwrap().sensing_intervals, vec![(AppKind::Temperature, 5)]);
        assert_eq!(s.sd_contents(NodeId(4)), BTreeSet::from([fw(1)]));
        assert_eq!(s.registers().len(), 5);
        s.compact().unwrap();
        let mut again = Store::open(dir.path()).unwrap();
        assert_eq!(again.registers(), s.registers());
        assert_eq!(again.sd_contents(NodeId(4)), BTreeSet::from([fw(1)]));
        // ids continue after the highest live row
        assert_eq!(again.record_sd_contents(NodeId(4), fw(7)).unwrap(), 2);
        let lines = fs::read_to_string(dir.path().join(OTA_FIRMWARES)).unwrap();
        assert_eq!(lines.lines().count(), 2);
    }

    #[test]
    fn corrupt_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(DEVICES), "{\"op\":\"put\"\n").unwrap();
        assert!(matches!(Store::open(dir.path()), Err(StoreError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn monitor_csv_lists_each_reading() {
        let mut s = Store::in_memory();
        s.upsert_device(DeviceRow::new(NodeId(1), 90, 1)).unwrap();
        let mut r = temp(21.5);
        r.insert(AppKind::Humidity, 40.0);
        s.insert_register(NodeId(1), fw(3), 1000, r, 87).unwrap();
        assert_eq!(
            s.monitor_csv(&RegisterQuery::default()),
            "timestamp_ms,device_id,firmware_id,app,value,battery_pct\n1000,1,3,temperature,21.5,87\n1000,1,3,humidity,40,87\n"
        );
        let q = RegisterQuery {
            app: Some(AppKind::Humidity),
            ..Default::default()
        };
        assert_eq!(s.monitor_csv(&q).lines().count(), 2);
    }

    proptest! {
        /// Query results equal a naive filter over all rows.
        #[test]
        fn query_matches_scan(
            rows in proptest::collection::vec((1u32..4, 0u64..100, 0usize..3), 0..40),
            dev in proptest::option::of(1u32..4),
            from in proptest::option::of(0u64..100),
            to in proptest::option::of(0u64..100),
        ) {
            let mut s = Store::in_memory();
            for d in 1..4 {
                s.upsert_device(DeviceRow::new(NodeId(d), 100, 1)).unwrap();
            }
            let kinds = [AppKind::Temperature, AppKind::Humidity, AppKind::Luminosity];
            for &(d, t, k) in &rows {
                s.insert_register(NodeId(d), fw(7), t, BTreeMap::from([(kinds[k], 1.0)]), 50).unwrap();
            }
            let q = RegisterQuery { device: dev.map(NodeId), app: Some(AppKind::Humidity), from_ms: from, to_ms: to };
            let got: Vec<u64> = s.query(&q).iter().map(|r| r.id).collect();
            let mut want: Vec<(u64, u64)> = s.registers().iter()
                .filter(|r| dev.is_none_or(|d| r.device_id.0 == d))
                .filter(|r| r.readings.contains_key(&AppKind::Humidity))
                .filter(|r| from.is_none_or(|f| r.timestamp_ms >= f) && to.is_none_or(|t| r.timestamp_ms <= t))
                .map(|r| (r.timestamp_ms, r.id))
                .collect();
            want.sort();
            prop_assert_eq!(got, want.into_iter().map(|x| x.1).collect::<Vec<_>>());
            prop_assert!(s.validate().is_ok());
        }
    }
}
