//! Merged sensing timetables.
//!
//! A node running several periodic applications wakes at the union of their
//! sampling instants. The timetable repeats every hyperperiod (the lcm of all
//! intervals) and is described by the gaps between consecutive wake-ups plus,
//! for every wake-up, the bitmask of applications to sample.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AppKind, FirmwareId, ProtoError};

/// Longest accepted sensing interval, one day.
pub const MAX_INTERVAL_S: u32 = 86_400;
/// Longest accepted hyperperiod.
pub const MAX_HYPERPERIOD_S: u64 = 10_000_000;

/// One application with its sensing interval. Presence carries none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AppConfig {
    kind: AppKind,
    interval_s: Option<u32>,
}

impl AppConfig {
    pub fn periodic(kind: AppKind, interval_s: u32) -> Result<Self, ProtoError> {
        if !kind.is_periodic() {
            return Err(ProtoError::UnexpectedInterval(kind));
        }
        if interval_s == 0 || interval_s > MAX_INTERVAL_S {
            return Err(ProtoError::InvalidInterval(interval_s));
        }
        Ok(AppConfig {
            kind,
            interval_s: Some(interval_s),
        })
    }

    pub fn presence() -> Self {
        AppConfig {
            kind: AppKind::Presence,
            interval_s: None,
        }
    }

    /// Builds a config for `kind`, requiring an interval exactly when the kind is periodic.
    pub fn new(kind: AppKind, interval_s: Option<u32>) -> Result<Self, ProtoError> {
        match (kind.is_periodic(), interval_s) {
            (true, Some(i)) => AppConfig::periodic(kind, i),
            (true, None) => Err(ProtoError::MissingInterval(kind)),
            (false, None) => Ok(AppConfig::presence()),
            (false, Some(_)) => Err(ProtoError::UnexpectedInterval(kind)),
        }
    }

    pub fn kind(&self) -> AppKind {
        self.kind
    }

    pub fn interval_s(&self) -> Option<u32> {
        self.interval_s
    }
}

pub(crate) fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Merged timetable for one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleParts", into = "ScheduleParts")]
pub struct Schedule {
    intervals: Vec<u32>,
    indices: Vec<FirmwareId>,
    hyperperiod: u64,
}

#[derive(Serialize, Deserialize)]
struct ScheduleParts {
    intervals: Vec<u32>,
    indices: Vec<u8>,
}

impl TryFrom<ScheduleParts> for Schedule {
    type Error = ProtoError;
    fn try_from(p: ScheduleParts) -> Result<Self, Self::Error> {
        let indices = p
            .indices
            .into_iter()
            .map(FirmwareId::new)
            .collect::<Result<Vec<_>, _>>()?;
        Schedule::from_parts(p.intervals, indices)
    }
}

impl From<Schedule> for ScheduleParts {
    fn from(s: Schedule) -> Self {
        ScheduleParts {
            intervals: s.intervals,
            indices: s.indices.into_iter().map(FirmwareId::get).collect(),
        }
    }
}

/// Merges the periodic applications of `configs` into one timetable.
///
/// Presence entries are accepted and ignored. Several entries of the same
/// kind with different intervals are all honoured.
pub fn build_schedule(configs: &[AppConfig]) -> Result<Schedule, ProtoError> {
    let mut gens: Vec<(u64, u8)> = configs
        .iter()
        .filter_map(|c| c.interval_s.map(|i| (i as u64, c.kind.bit())))
        .collect();
    if gens.is_empty() {
        return Err(ProtoError::NoPeriodicApps);
    }
    gens.sort_unstable();
    gens.dedup();

    let mut hyper = 1u64;
    for &(i, _) in &gens {
        if i == 0 || i > MAX_INTERVAL_S as u64 {
            return Err(ProtoError::InvalidInterval(i as u32));
        }
        hyper = hyper / gcd(hyper, i) * i;
        if hyper > MAX_HYPERPERIOD_S {
            return Err(ProtoError::HyperperiodTooLarge(hyper));
        }
    }

    let mut events: Vec<(u64, u8)> = Vec::new();
    for &(i, bit) in &gens {
        let mut t = 0;
        while t <= hyper {
            events.push((t, bit));
            t += i;
        }
    }
    events.sort_unstable_by_key(|e| e.0);

    let mut times: Vec<u64> = Vec::new();
    let mut masks: Vec<u8> = Vec::new();
    for (t, bit) in events {
        if times.last() == Some(&t) {
            *masks.last_mut().expect("parallel vectors") |= bit;
        } else {
            times.push(t);
            masks.push(bit);
        }
    }

    let intervals = times.windows(2).map(|w| (w[1] - w[0]) as u32).collect();
    let indices = masks
        .into_iter()
        .map(FirmwareId::new)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Schedule {
        intervals,
        indices,
        hyperperiod: hyper,
    })
}

impl Schedule {
    /// Validates a timetable received on the wire.
    pub fn from_parts(intervals: Vec<u32>, indices: Vec<FirmwareId>) -> Result<Self, ProtoError> {
        if intervals.is_empty() {
            return Err(ProtoError::InvalidSchedule("no intervals".into()));
        }
        if indices.len() != intervals.len() + 1 {
            return Err(ProtoError::InvalidSchedule(format!(
                "{} indices for {} intervals",
                indices.len(),
                intervals.len()
            )));
        }
        if let Some(&bad) = intervals.iter().find(|&&i| i == 0 || i > MAX_INTERVAL_S) {
            return Err(ProtoError::InvalidInterval(bad));
        }
        let hyperperiod: u64 = intervals.iter().map(|&i| i as u64).sum();
        if hyperperiod > MAX_HYPERPERIOD_S {
            return Err(ProtoError::HyperperiodTooLarge(hyperperiod));
        }
        let first = indices[0];
        if indices[indices.len() - 1] != first {
            return Err(ProtoError::InvalidSchedule(
                "first and last index differ".into(),
            ));
        }
        if first.contains(AppKind::Presence) {
            return Err(ProtoError::InvalidSchedule(
                "presence cannot be scheduled".into(),
            ));
        }
        if let Some(bad) = indices.iter().find(|ix| !ix.is_subset_of(first)) {
            return Err(ProtoError::InvalidSchedule(format!(
                "index {bad} fires an app missing from index 0"
            )));
        }
        Ok(Schedule {
            intervals,
            indices,
            hyperperiod,
        })
    }

    /// Gaps in seconds between consecutive sensing events.
    pub fn intervals(&self) -> &[u32] {
        &self.intervals
    }

    /// Applications fired at each event, one more entry than [`Self::intervals`].
    pub fn indices(&self) -> &[FirmwareId] {
        &self.indices
    }

    pub fn hyperperiod(&self) -> u64 {
        self.hyperperiod
    }

    /// Sensing events per hyperperiod (the closing event belongs to the next cycle).
    pub fn events_per_cycle(&self) -> usize {
        self.intervals.len()
    }

    /// All periodic applications in the timetable.
    pub fn periodic_bits(&self) -> FirmwareId {
        self.indices[0]
    }

    /// Offsets in seconds of the events of one cycle, starting at 0.
    pub fn offsets(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.intervals.len());
        let mut t = 0u64;
        for &i in &self.intervals {
            out.push(t);
            t += i as u64;
        }
        out
    }

    /// Smallest set of intervals per kind that regenerates this timetable.
    pub fn app_intervals(&self) -> Vec<(AppKind, u32)> {
        let offsets = self.offsets();
        let mut per_kind: BTreeMap<AppKind, Vec<u64>> = BTreeMap::new();
        for (k, &t) in offsets.iter().enumerate().skip(1) {
            for kind in self.indices[k].apps() {
                let gens = per_kind.entry(kind).or_default();
                if !gens.iter().any(|g| t % g == 0) {
                    gens.push(t);
                }
            }
        }
        // A kind that only fires at 0 repeats once per hyperperiod.
        for kind in self.periodic_bits().apps() {
            per_kind.entry(kind).or_insert_with(|| vec![self.hyperperiod]);
        }
        per_kind
            .into_iter()
            .flat_map(|(k, gens)| gens.into_iter().map(move |g| (k, g as u32)))
            .collect()
    }

    /// Configs equivalent to [`Self::app_intervals`].
    pub fn app_configs(&self) -> Vec<AppConfig> {
        self.app_intervals()
            .into_iter()
            .map(|(kind, interval_s)| AppConfig {
                kind,
                interval_s: Some(interval_s),
            })
            .collect()
    }

    /// First event at or after `elapsed_s` seconds from the schedule start.
    ///
    /// Returns the absolute offset in seconds and the event index within the cycle.
    pub fn next_event_at_or_after(&self, elapsed_s: u64) -> (u64, usize) {
        let cycle = elapsed_s / self.hyperperiod;
        let rem = elapsed_s % self.hyperperiod;
        let mut t = 0u64;
        for (k, &i) in self.intervals.iter().enumerate() {
            if t >= rem {
                return (cycle * self.hyperperiod + t, k);
            }
            t += i as u64;
        }
        ((cycle + 1) * self.hyperperiod, 0)
    }
}

/// Smallest set of intervals equivalent to `intervals` for each kind.
///
/// An interval that is a multiple of another interval of the same kind adds
/// no sampling instants and is dropped.
pub fn minimal_intervals(intervals: &[(AppKind, u32)]) -> Vec<(AppKind, u32)> {
    let mut sorted = intervals.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out: Vec<(AppKind, u32)> = Vec::new();
    for (k, i) in sorted {
        if !out.iter().any(|&(ok, oi)| ok == k && i % oi == 0) {
            out.push((k, i));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use AppKind::*;

    fn cfg(kind: AppKind, i: u32) -> AppConfig {
        AppConfig::periodic(kind, i).unwrap()
    }

    fn ids(s: &Schedule) -> Vec<u8> {
        s.indices().iter().map(|f| f.get()).collect()
    }

    /// Independent check: enumerate every second of the hyperperiod.
    fn brute_force(gens: &[(u32, u8)], hyper: u64) -> Vec<(u64, u8)> {
        (0..=hyper)
            .filter_map(|t| {
                let m = gens
                    .iter()
                    .filter(|(i, _)| t % *i as u64 == 0)
                    .fold(0u8, |a, (_, b)| a | b);
                (m != 0).then_some((t, m))
            })
            .collect()
    }

    #[test]
    fn three_app_example() {
        let s = build_schedule(&[cfg(Temperature, 5), cfg(Humidity, 10), cfg(Luminosity, 15)]).unwrap();
        assert_eq!(s.intervals(), &[5, 5, 5, 5, 5, 5]);
        assert_eq!(ids(&s), vec![7, 1, 3, 5, 3, 1, 7]);
        assert_eq!(s.hyperperiod(), 30);
    }

    #[test]
    fn single_progression() {
        let s = build_schedule(&[cfg(Temperature, 5)]).unwrap();
        assert_eq!(s.intervals(), &[5]);
        assert_eq!(ids(&s), vec![1, 1]);
        assert_eq!(s.hyperperiod(), 5);
    }

    #[test]
    fn coprime_pair_matches_enumeration() {
        let s = build_schedule(&[cfg(Temperature, 3), cfg(Humidity, 7)]).unwrap();
        assert_eq!(s.hyperperiod(), 21);
        let oracle = brute_force(&[(3, 1), (7, 2)], 21);
        assert_eq!(oracle.len(), 10);
        assert_eq!(s.indices().len(), 10);
        let mut t = 0u64;
        for (k, (ot, om)) in oracle.iter().enumerate() {
            assert_eq!(t, *ot);
            assert_eq!(s.indices()[k].get(), *om);
            if k < s.intervals().len() {
                t += s.intervals()[k] as u64;
            }
        }
    }

    #[test]
    fn presence_only_rejected() {
        assert_eq!(build_schedule(&[AppConfig::presence()]), Err(ProtoError::NoPeriodicApps));
        assert_eq!(build_schedule(&[]), Err(ProtoError::NoPeriodicApps));
    }

    #[test]
    fn presence_is_ignored() {
        let a = build_schedule(&[cfg(Humidity, 4), AppConfig::presence()]).unwrap();
        let b = build_schedule(&[cfg(Humidity, 4)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_kind_two_intervals() {
        let s = build_schedule(&[cfg(Temperature, 5), cfg(Temperature, 7)]).unwrap();
        assert_eq!(s.hyperperiod(), 35);
        assert_eq!(s.app_intervals(), vec![(Temperature, 5), (Temperature, 7)]);
    }

    #[test]
    fn interval_bounds() {
        assert_eq!(AppConfig::periodic(Temperature, 0), Err(ProtoError::InvalidInterval(0)));
        assert!(AppConfig::periodic(Temperature, MAX_INTERVAL_S + 1).is_err());
        assert!(AppConfig::periodic(Presence, 5).is_err());
        assert_eq!(AppConfig::new(Humidity, None), Err(ProtoError::MissingInterval(Humidity)));
    }

    #[test]
    fn hyperperiod_cap() {
        let r = build_schedule(&[
            cfg(Temperature, 86_399),
            cfg(Humidity, 86_398),
            cfg(Luminosity, 86_397),
        ]);
        assert!(matches!(r, Err(ProtoError::HyperperiodTooLarge(_))));
    }

    #[test]
    fn app_intervals_round_trip() {
        let s = build_schedule(&[cfg(Temperature, 5), cfg(Humidity, 10), cfg(Luminosity, 15)]).unwrap();
        assert_eq!(
            s.app_intervals(),
            vec![(Temperature, 5), (Humidity, 10), (Luminosity, 15)]
        );
        assert_eq!(build_schedule(&s.app_configs()).unwrap(), s);
    }

    #[test]
    fn next_event_lookup() {
        let s = build_schedule(&[cfg(Temperature, 3), cfg(Humidity, 7)]).unwrap();
        assert_eq!(s.next_event_at_or_after(0), (0, 0));
        assert_eq!(s.next_event_at_or_after(1), (3, 1));
        assert_eq!(s.next_event_at_or_after(7), (7, 3));
        assert_eq!(s.next_event_at_or_after(19), (21, 0));
        assert_eq!(s.next_event_at_or_after(22), (24, 1));
    }

    #[test]
    fn from_parts_checks() {
        let f = |v: u8| FirmwareId::new(v).unwrap();
        assert!(Schedule::from_parts(vec![5], vec![f(1)]).is_err());
        assert!(Schedule::from_parts(vec![5], vec![f(1), f(3)]).is_err());
        assert!(Schedule::from_parts(vec![5, 5], vec![f(1), f(2), f(1)]).is_err());
        assert!(Schedule::from_parts(vec![5], vec![f(9), f(9)]).is_err());
        assert!(Schedule::from_parts(vec![0], vec![f(1), f(1)]).is_err());
        let ok = Schedule::from_parts(vec![5, 5], vec![f(3), f(1), f(3)]).unwrap();
        assert_eq!(ok.hyperperiod(), 10);
    }

    #[test]
    fn minimal_drops_multiples() {
        assert_eq!(
            minimal_intervals(&[(Temperature, 10), (Temperature, 5), (Humidity, 10), (Temperature, 7)]),
            vec![(Temperature, 5), (Temperature, 7), (Humidity, 10)]
        );
    }
}
