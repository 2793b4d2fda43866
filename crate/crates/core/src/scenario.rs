//! Line-oriented scenario files.
//!
//! ```text
//! # comment
//! node <id> <role> [parent=<id>] [sd=all|none|<fw>,<fw>..] [battery=<pct>] [serial=<bps>] [listen=<min>]
//! link <id> <id>
//! arrive <t_s> <app> [<interval_s>] [for=<s>]
//! depart <t_s> <app>
//! pir <t_s> <node>
//! battery <t_s> <node> <pct>
//! ```
//!
//! Roles are `coordinator`, `router` and `end_device`. Times are seconds and
//! may be fractional; they are rounded to the millisecond.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controller::{AppRequest, Departure};
use crate::netsim::{
    EventKind, NetError, NodeId, NodeSetup, NodeSpec, Role, SdPreload, SimConfig, SimEvent, Simulation, Topology,
    TopologyError, COORDINATOR_SERIAL_BPS, NODE_SERIAL_BPS,
};
use crate::proto::{AppKind, FirmwareId};
use crate::store::Store;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDecl {
    pub spec: NodeSpec,
    pub setup: NodeSetup,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioEvent {
    Arrive { t_ms: u64, request: AppRequest },
    Depart { t_ms: u64, kind: AppKind },
    Pir { t_ms: u64, node: NodeId },
    Battery { t_ms: u64, node: NodeId, pct: u8 },
}

impl ScenarioEvent {
    pub fn time_ms(&self) -> u64 {
        match *self {
            ScenarioEvent::Arrive { t_ms, .. }
            | ScenarioEvent::Depart { t_ms, .. }
            | ScenarioEvent::Pir { t_ms, .. }
            | ScenarioEvent::Battery { t_ms, .. } => t_ms,
        }
    }

    fn to_sim(&self) -> SimEvent {
        let kind = match *self {
            ScenarioEvent::Arrive { request, .. } => EventKind::AppArrival(request),
            ScenarioEvent::Depart { kind, .. } => EventKind::AppDeparture(Departure::Kind(kind)),
            ScenarioEvent::Pir { node, .. } => EventKind::PirDetect { node },
            ScenarioEvent::Battery { node, pct, .. } => EventKind::BatteryLevel { node, pct },
        };
        SimEvent {
            time_ms: self.time_ms(),
            kind,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scenario {
    pub nodes: Vec<NodeDecl>,
    pub links: Vec<(NodeId, NodeId)>,
    pub events: Vec<ScenarioEvent>,
}

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("fig8_demo", include_str!("../scenarios/fig8_demo.scn")),
    ("realloc_demo", include_str!("../scenarios/realloc_demo.scn")),
    ("mesh_demo", include_str!("../scenarios/mesh_demo.scn")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

fn seconds_to_ms(s: &str) -> Option<u64> {
    let v: f64 = s.parse().ok()?;
    (v.is_finite() && v >= 0.0).then(|| (v * 1000.0).round() as u64)
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut sc = Scenario::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| ScenarioError::Parse { line: n + 1, reason };
            let words: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str, what: &str| -> Result<u64, ScenarioError> {
                s.parse().map_err(|_| err(format!("{what} must be a whole number, got {s:?}")))
            };
            let time = |s: &str| seconds_to_ms(s).ok_or_else(|| err(format!("bad time {s:?}")));
            let app = |s: &str| AppKind::parse(s).ok_or_else(|| err(format!("unknown application {s:?}")));
            let node_id = |s: &str| -> Result<NodeId, ScenarioError> { Ok(NodeId(num(s, "node id")? as u32)) };
            let pct = |s: &str| -> Result<u8, ScenarioError> {
                match num(s, "battery")? {
                    p @ 0..=100 => Ok(p as u8),
                    p => Err(err(format!("battery {p}% outside 0..=100"))),
                }
            };
            match words.as_slice() {
                ["node", id, role, opts @ ..] => {
                    let id = node_id(id)?;
                    let role = Role::parse(role).ok_or_else(|| err(format!("unknown role {role:?}")))?;
                    let mut spec = NodeSpec {
                        id,
                        role,
                        parent: None,
                        serial_bps: if role == Role::Coordinator { COORDINATOR_SERIAL_BPS } else { NODE_SERIAL_BPS },
                    };
                    let mut setup = NodeSetup::default();
                    for opt in opts {
                        let (k, v) = opt
                            .split_once('=')
                            .ok_or_else(|| err(format!("expected key=value, got {opt:?}")))?;
                        match k {
                            "parent" => spec.parent = Some(node_id(v)?),
                            "serial" => spec.serial_bps = num(v, "serial rate")? as u32,
                            "battery" => setup.battery_pct = pct(v)?,
                            "listen" => {
                                setup.listen_interval_min = match num(v, "listen interval")? {
                                    0 => return Err(err("listen interval must be at least 1 minute".into())),
                                    m => m as u32,
                                }
                            }
                            "sd" => {
                                setup.sd = match v {
                                    "all" => SdPreload::All,
                                    "none" => SdPreload::Empty,
                                    list => SdPreload::List(
                                        list.split(',')
                                            .map(|f| {
                                                let id = num(f, "firmware id")?;
                                                u8::try_from(id)
                                                    .ok()
                                                    .and_then(|i| FirmwareId::new(i).ok())
                                                    .ok_or_else(|| err(format!("firmware id {id} outside 1..=15")))
                                            })
                                            .collect::<Result<BTreeSet<_>, _>>()?,
                                    ),
                                }
                            }
                            _ => return Err(err(format!("unknown node option {k:?}"))),
                        }
                    }
                    sc.nodes.push(NodeDecl { spec, setup });
                }
                ["link", a, b] => sc.links.push((node_id(a)?, node_id(b)?)),
                ["arrive", t, kind, rest @ ..] => {
                    let kind = app(kind)?;
                    let mut interval_s = None;
                    let mut activity_s = None;
                    for w in rest {
                        if let Some(d) = w.strip_prefix("for=") {
                            activity_s = Some(num(d, "activity time")?);
                        } else if interval_s.is_none() {
                            interval_s = Some(num(w, "interval")? as u32);
                        } else {
                            return Err(err(format!("unexpected {w:?}")));
                        }
                    }
                    let request = AppRequest {
                        kind,
                        interval_s,
                        activity_s,
                    };
                    request.config().map_err(|e| err(e.to_string()))?;
                    sc.events.push(ScenarioEvent::Arrive { t_ms: time(t)?, request });
                }
                ["depart", t, kind] => sc.events.push(ScenarioEvent::Depart {
                    t_ms: time(t)?,
                    kind: app(kind)?,
                }),
                ["pir", t, node] => sc.events.push(ScenarioEvent::Pir {
                    t_ms: time(t)?,
                    node: node_id(node)?,
                }),
                ["battery", t, node, p] => sc.events.push(ScenarioEvent::Battery {
                    t_ms: time(t)?,
                    node: node_id(node)?,
                    pct: pct(p)?,
                }),
                _ => return Err(err(format!("cannot parse {line:?}"))),
            }
        }
        Ok(sc)
    }

    /// True when the scenario declares no network at all.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.events.is_empty()
    }

    pub fn topology(&self) -> Result<Topology, ScenarioError> {
        let mut b = Topology::builder();
        for d in &self.nodes {
            b = b.node(d.spec.clone());
        }
        for &(a, c) in &self.links {
            b = b.link(a.0, c.0);
        }
        Ok(b.build()?)
    }

    /// Presence events drawn uniformly over `[0, duration_ms)` for every node,
    /// `per_hour` on average, from a seeded generator.
    pub fn generate_pir(&self, seed: u64, duration_ms: u64, per_hour: f64) -> Vec<ScenarioEvent> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = (per_hour * duration_ms as f64 / 3_600_000.0).round() as usize;
        let mut draws = Vec::new();
        for d in self.nodes.iter().filter(|d| d.spec.role != Role::Coordinator) {
            for _ in 0..count {
                draws.push((rng.gen_range(0..duration_ms.max(1)), d.spec.id));
            }
        }
        draws.sort();
        draws.into_iter().map(|(t_ms, node)| ScenarioEvent::Pir { t_ms, node }).collect()
    }

    /// A ready-to-run world with every scenario event queued.
    pub fn build(&self, cfg: SimConfig, store: Store) -> Result<Simulation, ScenarioError> {
        let topo = self.topology()?;
        let setups: BTreeMap<NodeId, NodeSetup> = self.nodes.iter().map(|d| (d.spec.id, d.setup.clone())).collect();
        let mut sim = Simulation::new(topo, &setups, cfg, store)?;
        for e in &self.events {
            sim.schedule_event(e.to_sim())?;
        }
        Ok(sim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_directive() {
        let sc = Scenario::parse(
            "# demo\nnode 0 coordinator\nnode 1 router sd=1,3 battery=90 listen=2\nnode 2 end_device parent=1 sd=all\nlink 0 1\n\
             arrive 10 temperature 5 for=600\narrive 12.5 pir\ndepart 700 temperature\npir 20 2\nbattery 30 1 19\n",
        )
        .unwrap();
        assert_eq!(sc.nodes.len(), 3);
        assert_eq!(sc.nodes[1].setup.battery_pct, 90);
        assert_eq!(sc.nodes[1].setup.listen_interval_min, 2);
        assert_eq!(sc.nodes[2].setup.sd, SdPreload::All);
        assert_eq!(sc.nodes[2].spec.parent, Some(NodeId(1)));
        assert_eq!(sc.events.len(), 5);
        assert_eq!(
            sc.events[0],
            ScenarioEvent::Arrive {
                t_ms: 10_000,
                request: AppRequest {
                    kind: AppKind::Temperature,
                    interval_s: Some(5),
                    activity_s: Some(600)
                }
            }
        );
        assert_eq!(sc.events[1].time_ms(), 12_500);
        sc.topology().unwrap();
    }

    #[test]
    fn reports_line_numbers() {
        let e = Scenario::parse("node 0 coordinator\n\narrive 5 temperature\n").unwrap_err();
        assert!(matches!(e, ScenarioError::Parse { line: 3, .. }), "{e}");
        let e = Scenario::parse("node 0 king\n").unwrap_err();
        assert!(matches!(e, ScenarioError::Parse { line: 1, .. }));
        let e = Scenario::parse("node 1 router sd=16\n").unwrap_err();
        assert!(e.to_string().contains("outside 1..=15"));
        assert!(Scenario::parse("battery 1 1 101\n").is_err());
        assert!(Scenario::parse("arrive 1 pir 5\n").is_err());
    }

    #[test]
    fn bundled_scenarios_parse_and_build() {
        for (name, text) in BUNDLED {
            let sc = Scenario::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            sc.build(SimConfig::default(), Store::in_memory())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn pir_generation_is_seeded() {
        let sc = Scenario::parse("node 0 coordinator\nnode 1 router\nnode 2 router\nlink 0 1\nlink 0 2\n").unwrap();
        let a = sc.generate_pir(7, 3_600_000, 10.0);
        assert_eq!(a, sc.generate_pir(7, 3_600_000, 10.0));
        assert_ne!(a, sc.generate_pir(8, 3_600_000, 10.0));
        assert_eq!(a.len(), 20);
        assert!(a.windows(2).all(|w| w[0].time_ms() <= w[1].time_ms()));
    }
}
