//! The simulation world: nodes, the controller and the network between them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::engine::{EventLog, EventQueue, LogRecord};
use super::link::{image_size, LinkModel};
use super::topology::{NodeId, Role, Topology};
use super::NetError;
use crate::controller::{AppRequest, Controller, ControllerAction, ControllerConfig};
use crate::energy::{CurrentDraws, EnergyRole, DEFAULT_BATTERY_MAH};
use crate::node::{Node, NodeAction, NodeConfig, TimerKind, DEFAULT_LISTEN_INTERVAL_MIN, SD_CAPACITY_BYTES};
use crate::proto::{minimal_intervals, phy_size, FirmwareId, Frame};
use crate::store::Store;

pub use crate::controller::Departure;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimConfig {
    pub link: LinkModel,
    pub draws: CurrentDraws,
    pub controller: ControllerConfig,
}

/// Images on a node's SD card at deployment time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdPreload {
    #[default]
    Empty,
    All,
    List(BTreeSet<FirmwareId>),
}

impl SdPreload {
    pub fn images(&self) -> BTreeSet<FirmwareId> {
        match self {
            SdPreload::Empty => BTreeSet::new(),
            SdPreload::All => FirmwareId::all().collect(),
            SdPreload::List(l) => l.clone(),
        }
    }
}

/// Per-node settings that are not part of the topology.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSetup {
    pub battery_pct: u8,
    pub battery_capacity_mah: f64,
    pub listen_interval_min: u32,
    pub sd: SdPreload,
    pub sd_capacity_bytes: u64,
}

impl Default for NodeSetup {
    fn default() -> Self {
        NodeSetup {
            battery_pct: 100,
            battery_capacity_mah: DEFAULT_BATTERY_MAH,
            listen_interval_min: DEFAULT_LISTEN_INTERVAL_MIN,
            sd: SdPreload::Empty,
            sd_capacity_bytes: SD_CAPACITY_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Alarm1 { node: NodeId, gen: u64 },
    Alarm2 { node: NodeId, gen: u64 },
    WindowEnd { node: NodeId, gen: u64 },
    PirDetect { node: NodeId },
    FrameArrival { frame: usize },
    TransferComplete { node: NodeId, firmware: FirmwareId, duration_s: f64 },
    Restart { node: NodeId, firmware: FirmwareId },
    AppArrival(AppRequest),
    AppDeparture(Departure),
    /// Overrides a node's remaining charge.
    BatteryLevel { node: NodeId, pct: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time_ms: u64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameStatus {
    InFlight,
    /// Held by the parent of a sleeping end device.
    Buffered,
    Delivered,
    Dropped(String),
}

#[derive(Debug, Clone)]
struct FrameRecord {
    src: NodeId,
    dst: NodeId,
    path: Vec<NodeId>,
    frame: Frame,
    status: FrameStatus,
}

/// Totals over every frame handed to the network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameCounts {
    pub sent: usize,
    pub delivered: usize,
    pub buffered: usize,
    pub dropped: usize,
    pub in_flight: usize,
}

fn ms(seconds: f64) -> u64 {
    (seconds * 1000.0).ceil() as u64
}

pub struct Simulation {
    topo: Topology,
    cfg: SimConfig,
    queue: EventQueue<EventKind>,
    nodes: BTreeMap<NodeId, Node>,
    controller: Controller,
    log: EventLog,
    frames: Vec<FrameRecord>,
    /// Frames waiting at a parent, keyed by the sleeping end device.
    buffers: BTreeMap<NodeId, VecDeque<usize>>,
    armed: BTreeMap<(NodeId, TimerKind), u64>,
    last_arrival: BTreeMap<NodeId, u64>,
    awaiting_info: BTreeSet<NodeId>,
    violations: Vec<String>,
}

impl Simulation {
    /// Builds the world at time zero. Nodes missing from `setups` get defaults.
    pub fn new(topo: Topology, setups: &BTreeMap<NodeId, NodeSetup>, cfg: SimConfig, store: Store) -> Result<Self, NetError> {
        let mut controller = Controller::new(topo.coordinator(), store, cfg.controller.clone());
        let mut nodes = BTreeMap::new();
        for id in topo.sensor_nodes() {
            let setup = setups.get(&id).cloned().unwrap_or_default();
            let role = match topo.get(id).map(|s| s.role) {
                Some(Role::EndDevice) => EnergyRole::EndDevice,
                _ => EnergyRole::Router,
            };
            let ncfg = NodeConfig {
                listen_interval_min: setup.listen_interval_min,
                battery_capacity_mah: setup.battery_capacity_mah,
                battery_pct: setup.battery_pct,
                sd_capacity_bytes: setup.sd_capacity_bytes,
                draws: cfg.draws.clone(),
            };
            let mut node = Node::new(id, role, ncfg, 0);
            let images = setup.sd.images();
            for &f in &images {
                node.preload(f, image_size(f)).map_err(|e| NetError::Setup(id, e.to_string()))?;
            }
            controller
                .register_node(id, node.battery_pct(0).get(), node.listen_interval_min(), &images)
                .map_err(|e| NetError::Setup(id, e.to_string()))?;
            nodes.insert(id, node);
        }
        let mut sim = Simulation {
            topo,
            cfg,
            queue: EventQueue::new(),
            nodes,
            controller,
            log: EventLog::default(),
            frames: Vec::new(),
            buffers: BTreeMap::new(),
            armed: BTreeMap::new(),
            last_arrival: BTreeMap::new(),
            awaiting_info: BTreeSet::new(),
            violations: Vec::new(),
        };
        let ids: Vec<NodeId> = sim.nodes.keys().copied().collect();
        for id in ids {
            sim.sync_timers(id);
        }
        Ok(sim)
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn now_ms(&self) -> u64 {
        self.queue.now_ms()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn store(&self) -> &Store {
        self.controller.store()
    }

    pub fn into_store(self) -> Store {
        self.controller.into_store()
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    pub fn schedule_event(&mut self, event: SimEvent) -> Result<(), NetError> {
        self.queue.schedule(event.time_ms, event.kind)
    }

    /// Processes every event due at or before `until_ms`.
    pub fn run_until(&mut self, until_ms: u64) -> &EventLog {
        while let Some((t, ev)) = self.queue.pop_until(until_ms) {
            self.handle(t, ev);
        }
        self.queue.advance_to(until_ms);
        &self.log
    }

    fn record(&mut self, time_ms: u64, kind: &'static str, src: impl ToString, dst: impl ToString, detail: impl Into<String>) {
        self.log.push(LogRecord::new(time_ms, kind, src, dst, detail));
    }

    fn sync_timers(&mut self, id: NodeId) {
        let Some(node) = self.nodes.get(&id) else {
            return;
        };
        let mut due = Vec::new();
        for kind in [TimerKind::Alarm1, TimerKind::Alarm2, TimerKind::WindowEnd] {
            match node.timer(kind) {
                Some(t) if self.armed.get(&(id, kind)) != Some(&t.gen) => due.push((kind, t)),
                _ => {}
            }
        }
        for (kind, t) in due {
            self.armed.insert((id, kind), t.gen);
            let ev = match kind {
                TimerKind::Alarm1 => EventKind::Alarm1 { node: id, gen: t.gen },
                TimerKind::Alarm2 => EventKind::Alarm2 { node: id, gen: t.gen },
                TimerKind::WindowEnd => EventKind::WindowEnd { node: id, gen: t.gen },
            };
            if let Err(e) = self.queue.schedule(t.at_ms, ev) {
                self.violations.push(format!("node {id}: {e}"));
            }
        }
    }

    fn timer_current(&self, id: NodeId, kind: TimerKind, at: u64, gen: u64) -> bool {
        self.nodes
            .get(&id)
            .and_then(|n| n.timer(kind))
            .is_some_and(|t| t.at_ms == at && t.gen == gen)
    }

    fn handle(&mut self, t: u64, ev: EventKind) {
        match ev {
            EventKind::Alarm1 { node, gen } => {
                if self.timer_current(node, TimerKind::Alarm1, t, gen) {
                    let actions = self.nodes.get_mut(&node).expect("node").on_alarm1(t);
                    self.node_actions(t, node, actions);
                }
            }
            EventKind::Alarm2 { node, gen } => {
                if self.timer_current(node, TimerKind::Alarm2, t, gen) {
                    let actions = self.nodes.get_mut(&node).expect("node").on_alarm2(t);
                    self.node_actions(t, node, actions);
                    if self.nodes[&node].is_listening() {
                        self.flush(t, node);
                    }
                }
            }
            EventKind::WindowEnd { node, gen } => {
                if self.timer_current(node, TimerKind::WindowEnd, t, gen) {
                    self.nodes.get_mut(&node).expect("node").on_window_end(t);
                }
            }
            EventKind::PirDetect { node } => {
                self.record(t, "PIR", node, "-", "");
                match self.nodes.get_mut(&node).map(|n| n.on_pir(t)) {
                    Some(Ok(actions)) => self.node_actions(t, node, actions),
                    Some(Err(e)) => self.record(t, "WARN", node, "-", format!("presence event ignored: {e}")),
                    None => self.record(t, "WARN", node, "-", "presence event for unknown node"),
                }
            }
            EventKind::FrameArrival { frame } => self.arrive(t, frame),
            EventKind::TransferComplete {
                node,
                firmware,
                duration_s,
            } => {
                let result = self.nodes.get_mut(&node).expect("node").on_transfer_complete(t, duration_s);
                match result {
                    Ok(f) => {
                        self.record(t, "XFER_DONE", self.topo.coordinator(), node, format!("fw={f}"));
                        let actions = self.controller.on_transfer_complete(t, node, firmware);
                        self.controller_actions(t, actions);
                    }
                    Err(e) => self.record(t, "WARN", node, "-", e.to_string()),
                }
            }
            EventKind::Restart { node, firmware } => {
                let result = self.nodes.get_mut(&node).expect("node").on_restart(t, firmware);
                match result {
                    Ok(actions) => {
                        self.record(t, "RESTART", node, "-", format!("fw={firmware}"));
                        self.node_actions(t, node, actions);
                    }
                    Err(e) => {
                        self.awaiting_info.remove(&node);
                        self.record(t, "WARN", node, "-", format!("restart failed: {e}"));
                    }
                }
            }
            EventKind::AppArrival(req) => {
                let interval = req.interval_s.map_or("-".to_string(), |i| i.to_string());
                self.record(t, "ARRIVE", "-", "-", format!("app={} interval={interval}", req.kind.name()));
                let actions = self.controller.on_app_arrival(t, req);
                self.controller_actions(t, actions);
            }
            EventKind::AppDeparture(d) => {
                let actions = self.controller.on_app_departure(t, d);
                self.controller_actions(t, actions);
            }
            EventKind::BatteryLevel { node, pct } => {
                if let Some(n) = self.nodes.get_mut(&node) {
                    n.set_battery_pct(t, pct);
                    self.record(t, "BATTERY", node, "-", format!("pct={pct}"));
                }
            }
        }
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            self.sync_timers(id);
        }
    }

    fn node_actions(&mut self, t: u64, node: NodeId, actions: Vec<NodeAction>) {
        for a in actions {
            match a {
                NodeAction::Send(frame) => {
                    match &frame {
                        Frame::Info { .. } => {
                            self.awaiting_info.remove(&node);
                        }
                        Frame::SensorData { .. } if self.awaiting_info.contains(&node) => {
                            self.violations.push(format!("node {node} sent data before INFO after restart"));
                        }
                        _ => {}
                    }
                    let dst = self.topo.coordinator();
                    self.send(t, node, dst, frame);
                }
                NodeAction::BeginTransfer { firmware, size_bytes } => {
                    match self.cfg.link.ota_transfer_to(&self.topo, node, firmware) {
                        Ok((desc, timing)) => {
                            self.record(
                                t,
                                "XFER_START",
                                self.topo.coordinator(),
                                node,
                                format!(
                                    "fw={firmware} size={size_bytes} frames={} hops={} duration_ms={}",
                                    desc.frame_count,
                                    desc.hop_count,
                                    ms(timing.duration_s)
                                ),
                            );
                            let ev = EventKind::TransferComplete {
                                node,
                                firmware,
                                duration_s: timing.duration_s,
                            };
                            self.queue.schedule(t + ms(timing.duration_s), ev).expect("future time");
                        }
                        Err(e) => self.record(t, "WARN", node, "-", format!("transfer impossible: {e}")),
                    }
                }
                NodeAction::Deleted { firmware } => {
                    self.record(t, "DELETED", node, "-", format!("fw={firmware}"));
                    let actions = self.controller.on_deleted(t, node, firmware);
                    self.controller_actions(t, actions);
                }
                NodeAction::Restart { firmware, at_ms } => {
                    self.awaiting_info.insert(node);
                    self.record(t, "REBOOT", node, "-", format!("fw={firmware}"));
                    self.queue
                        .schedule(at_ms, EventKind::Restart { node, firmware })
                        .expect("future time");
                }
                NodeAction::Note(n) => self.record(t, "NOTE", node, "-", n),
            }
        }
    }

    fn controller_actions(&mut self, t: u64, actions: Vec<ControllerAction>) {
        for a in actions {
            match a {
                ControllerAction::Send { dst, frame } => {
                    if !self.nodes.get(&dst).is_some_and(Node::is_listening) {
                        self.violations
                            .push(format!("{} dispatched to node {dst} outside its listen window at {t}", frame.name()));
                    }
                    let src = self.topo.coordinator();
                    self.send(t, src, dst, frame);
                }
                ControllerAction::Log(r) => self.log.push(r),
                ControllerAction::ScheduleDeparture { at_ms, instance } => {
                    self.queue
                        .schedule(at_ms, EventKind::AppDeparture(Departure::Instance(instance)))
                        .expect("future time");
                }
            }
        }
    }

    fn send(&mut self, t: u64, src: NodeId, dst: NodeId, frame: Frame) {
        let id = self.frames.len();
        let path = match self.topo.route(src, dst) {
            Ok(p) => p,
            Err(e) => {
                self.record(t, "SEND", src, dst, format!("id={id} path=- {frame}"));
                self.record(t, "DROP", src, dst, format!("id={id} reason={e}"));
                self.frames.push(FrameRecord {
                    src,
                    dst,
                    path: Vec::new(),
                    frame,
                    status: FrameStatus::Dropped(e.to_string()),
                });
                return;
            }
        };
        let link = &self.cfg.link;
        let delay_s = match frame {
            Frame::OtaStart { .. } | Frame::OtaDelete { .. } => link.ota_command_s(
                path.len() as u32 - 1,
                self.topo.serial_bps(src).unwrap_or(1),
                self.topo.serial_bps(dst).unwrap_or(1),
            ),
            _ => link.frame_delay_s(&self.topo, &path, frame.encode().len(), phy_size(&frame)),
        };
        let at = (t + ms(delay_s)).max(self.last_arrival.get(&dst).copied().unwrap_or(0));
        self.last_arrival.insert(dst, at);
        let path_s: Vec<String> = path.iter().map(ToString::to_string).collect();
        self.record(t, "SEND", src, dst, format!("id={id} path={} {frame}", path_s.join("-")));
        self.frames.push(FrameRecord {
            src,
            dst,
            path,
            frame,
            status: FrameStatus::InFlight,
        });
        self.queue.schedule(at, EventKind::FrameArrival { frame: id }).expect("future time");
    }

    fn arrive(&mut self, t: u64, id: usize) {
        let (src, dst, frame) = {
            let r = &self.frames[id];
            (r.src, r.dst, r.frame.clone())
        };
        if dst == self.topo.coordinator() {
            self.frames[id].status = FrameStatus::Delivered;
            self.record(t, "RECV", src, dst, format!("id={id}"));
            let actions = self.controller.on_frame(t, src, &frame);
            self.controller_actions(t, actions);
            return;
        }
        let node = self.nodes.get_mut(&dst).expect("destination node");
        if node.is_listening() && !node.is_busy() {
            self.frames[id].status = FrameStatus::Delivered;
            self.record(t, "RECV", src, dst, format!("id={id}"));
            let result = self.nodes.get_mut(&dst).expect("node").on_frame(t, &frame);
            match result {
                Ok(actions) => self.node_actions(t, dst, actions),
                Err(e) => self.record(t, "REJECT", dst, src, format!("id={id} {e}")),
            }
            return;
        }
        let is_end_device = self.topo.get(dst).is_some_and(|s| s.role == Role::EndDevice);
        if is_end_device {
            let parent = self.topo.get(dst).and_then(|s| s.parent).expect("end device parent");
            let cap = self.cfg.link.parent_buffer_cap;
            let buf = self.buffers.entry(dst).or_default();
            let evicted = if buf.len() >= cap { buf.pop_front() } else { None };
            buf.push_back(id);
            if let Some(old) = evicted {
                self.frames[old].status = FrameStatus::Dropped("parent buffer full".into());
                self.record(t, "DROP", parent, dst, format!("id={old} reason=parent buffer full"));
            }
            self.frames[id].status = FrameStatus::Buffered;
            self.record(t, "BUFFER", parent, dst, format!("id={id}"));
        } else {
            self.frames[id].status = FrameStatus::Dropped("not listening".into());
            self.record(t, "DROP", src, dst, format!("id={id} reason=not listening"));
        }
    }

    /// Hands frames held by the parent to a waking end device.
    fn flush(&mut self, t: u64, ed: NodeId) {
        let Some(buf) = self.buffers.remove(&ed) else {
            return;
        };
        let parent = self.topo.get(ed).and_then(|s| s.parent).expect("end device parent");
        for id in buf {
            let frame = &self.frames[id].frame;
            let delay = self.cfg.link.radio_s(phy_size(frame) as f64)
                + self
                    .cfg
                    .link
                    .serial_s(frame.encode().len() as f64, self.topo.serial_bps(ed).unwrap_or(1));
            let at = (t + ms(delay)).max(self.last_arrival.get(&ed).copied().unwrap_or(0));
            self.last_arrival.insert(ed, at);
            self.frames[id].status = FrameStatus::InFlight;
            self.record(t, "FLUSH", parent, ed, format!("id={id}"));
            self.queue.schedule(at, EventKind::FrameArrival { frame: id }).expect("future time");
        }
    }

    pub fn frame_status(&self, id: usize) -> Option<&FrameStatus> {
        self.frames.get(id).map(|r| &r.status)
    }

    pub fn frame_counts(&self) -> FrameCounts {
        let mut c = FrameCounts {
            sent: self.frames.len(),
            ..FrameCounts::default()
        };
        for r in &self.frames {
            match r.status {
                FrameStatus::InFlight => c.in_flight += 1,
                FrameStatus::Buffered => c.buffered += 1,
                FrameStatus::Delivered => c.delivered += 1,
                FrameStatus::Dropped(_) => c.dropped += 1,
            }
        }
        c
    }

    /// Every cross-cutting invariant; an empty list means the run is sound.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = self.violations.clone();
        let now = self.now_ms();

        // Frame conservation, checked against the log as an independent count.
        let c = self.frame_counts();
        if c.delivered + c.buffered + c.dropped + c.in_flight != c.sent {
            out.push(format!("frame accounting does not add up: {c:?}"));
        }
        let sends = self.log.of_kind("SEND").count();
        let recv = self.log.of_kind("RECV").count();
        let drops = self.log.of_kind("DROP").count();
        let held: usize = self.buffers.values().map(VecDeque::len).sum();
        if sends != c.sent || recv != c.delivered || drops != c.dropped || held != c.buffered {
            out.push(format!(
                "log disagrees with frame table: SEND {sends} RECV {recv} DROP {drops} held {held} vs {c:?}"
            ));
        }

        // End devices talk only to their parent.
        for (id, r) in self.frames.iter().enumerate() {
            for (i, n) in r.path.iter().enumerate() {
                let Some(spec) = self.topo.get(*n) else { continue };
                if spec.role != Role::EndDevice {
                    continue;
                }
                let at_end = i == 0 || i + 1 == r.path.len();
                let neighbour = if i == 0 { r.path.get(1) } else { r.path.get(i - 1) };
                if !at_end || (r.path.len() > 1 && neighbour != spec.parent.as_ref()) {
                    out.push(format!("frame {id} routes end device {n} through a non-parent: {:?}", r.path));
                }
            }
        }
        for rec in self.log.of_kind("FLUSH") {
            let parent = rec
                .dst
                .parse()
                .ok()
                .and_then(|d| self.topo.get(NodeId(d)))
                .and_then(|s| s.parent);
            if parent.map(|p| p.to_string()) != Some(rec.src.clone()) {
                out.push(format!("flush from non-parent: {rec}"));
            }
        }

        for n in self.nodes.values() {
            out.extend(n.check(now));
        }
        if let Err(e) = self.store().validate() {
            out.push(e.to_string());
        }

        // Store agrees with the nodes wherever the controller is not mid-plan.
        for n in self.nodes.values() {
            if self.controller.is_busy(n.id()) {
                continue;
            }
            let Some(row) = self.store().device(n.id()) else {
                out.push(format!("node {} missing from devices", n.id()));
                continue;
            };
            if row.firmware_id != n.running() || row.sensing_intervals != minimal_intervals(&n.intervals()) {
                out.push(format!(
                    "devices row for node {} says fw {:?} {:?}, node runs {:?} {:?}",
                    n.id(),
                    row.firmware_id,
                    row.sensing_intervals,
                    n.running(),
                    n.intervals()
                ));
            }
            if self.store().sd_contents(n.id()) != n.sd_images() {
                out.push(format!("sd table for node {} differs from the card", n.id()));
            }
        }

        // Every accepted schedule answered by exactly one PROGOK.
        let mut accepted: BTreeMap<String, i64> = BTreeMap::new();
        for rec in self.log.records() {
            if rec.kind == "RECV" && rec.dst != self.topo.coordinator().to_string() {
                if let Some(id) = rec.detail.strip_prefix("id=").and_then(|s| s.parse::<usize>().ok()) {
                    if matches!(self.frames[id].frame, Frame::ScheduleUpdate { .. }) {
                        *accepted.entry(rec.dst.clone()).or_default() += 1;
                    }
                }
            }
            if rec.kind == "REJECT" && rec.detail.contains("schedule") {
                *accepted.entry(rec.src.clone()).or_default() -= 1;
            }
            if rec.kind == "SEND" && rec.detail.ends_with(" #PROGOK") && rec.src != self.topo.coordinator().to_string() {
                *accepted.entry(rec.src.clone()).or_default() -= 1;
            }
        }
        for (node, diff) in accepted {
            if diff != 0 {
                out.push(format!("node {node}: schedule updates and PROGOK replies differ by {diff}"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::AppKind;

    fn world() -> Simulation {
        let topo = Topology::builder()
            .coordinator(0)
            .router(1)
            .router(2)
            .link(0, 1)
            .link(1, 2)
            .end_device(3, 2)
            .build()
            .unwrap();
        let mut setups = BTreeMap::new();
        setups.insert(
            NodeId(1),
            NodeSetup {
                sd: SdPreload::List([1, 3].into_iter().map(|i| FirmwareId::new(i).unwrap()).collect()),
                ..NodeSetup::default()
            },
        );
        Simulation::new(topo, &setups, SimConfig::default(), Store::in_memory()).unwrap()
    }

    fn arrive(sim: &mut Simulation, t: u64, kind: AppKind, interval: Option<u32>) {
        sim.schedule_event(SimEvent {
            time_ms: t,
            kind: EventKind::AppArrival(AppRequest {
                kind,
                interval_s: interval,
                activity_s: None,
            }),
        })
        .unwrap();
    }

    #[test]
    fn deploys_and_samples() {
        let mut sim = world();
        arrive(&mut sim, 0, AppKind::Temperature, Some(5));
        sim.run_until(300_000);
        let n = sim.node(NodeId(1)).unwrap();
        assert_eq!(n.running().map(FirmwareId::get), Some(1));
        assert_eq!(n.intervals(), vec![(AppKind::Temperature, 5)]);
        assert!(sim.store().registers().len() > 20);
        assert_eq!(sim.check_invariants(), Vec::<String>::new());
    }

    #[test]
    fn end_device_gets_image_through_parent() {
        let topo = world().topology().clone();
        let low = NodeSetup {
            battery_pct: 15,
            ..NodeSetup::default()
        };
        let setups = BTreeMap::from([(NodeId(1), low.clone()), (NodeId(2), low)]);
        let mut sim = Simulation::new(topo, &setups, SimConfig::default(), Store::in_memory()).unwrap();
        arrive(&mut sim, 0, AppKind::Humidity, Some(30));
        sim.run_until(600_000);
        assert_eq!(sim.check_invariants(), Vec::<String>::new());
        let start = sim.log().of_kind("XFER_START").next().unwrap();
        assert_eq!(start.dst, "3");
        assert!(start.detail.contains("hops=3"), "{start}");
        assert_eq!(sim.node(NodeId(3)).unwrap().running().map(FirmwareId::get), Some(2));
        assert_eq!(sim.node(NodeId(3)).unwrap().intervals(), vec![(AppKind::Humidity, 30)]);
    }

    #[test]
    fn frame_to_sleeping_router_is_dropped_and_ed_frame_buffered() {
        let mut sim = world();
        sim.send(0, NodeId(0), NodeId(2), Frame::ProgOk);
        sim.send(0, NodeId(0), NodeId(3), Frame::ProgOk);
        sim.run_until(1_000);
        assert!(matches!(sim.frame_status(0), Some(FrameStatus::Dropped(_))));
        assert_eq!(sim.frame_status(1), Some(&FrameStatus::Buffered));
        sim.run_until(61_000);
        // flushed at the end device's first listen window, then rejected as unexpected
        assert_eq!(sim.frame_status(1), Some(&FrameStatus::Delivered));
        assert!(sim.log().of_kind("FLUSH").any(|r| r.src == "2" && r.dst == "3"));
        let bad = sim.check_invariants();
        assert!(bad.is_empty(), "{bad:?}");
    }
}
