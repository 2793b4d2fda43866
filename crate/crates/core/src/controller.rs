//! Central controller: admission, deployment planning, OTA sequencing and
//! low-battery reallocation.
//!
//! The decision functions ([`select_node`], [`plan_deployment`],
//! [`plan_transition`]) are pure. [`Controller`] wraps them in an
//! event-driven runtime that talks to nodes only through frames, sends
//! commands only in reply to a node's `#LISTEN`, and updates the store only
//! once the matching acknowledgement arrives.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{app_energy_rank, CurrentDraws, LOW_BATTERY_PCT};
use crate::netsim::{image_size, LogRecord, NodeId};
use crate::proto::{
    build_schedule, firmware_of, minimal_intervals, AppConfig, AppKind, FirmwareId, Frame, ProtoError, Schedule,
};
use crate::store::{DeviceRow, Store, StoreError};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("no node has more than {}% battery", LOW_BATTERY_PCT)]
    NoEligibleNode,
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A monitoring application asking to be deployed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppRequest {
    pub kind: AppKind,
    /// Seconds between samples; absent for presence.
    pub interval_s: Option<u32>,
    /// How long the application stays once admitted, in seconds.
    pub activity_s: Option<u64>,
}

impl AppRequest {
    pub fn config(&self) -> Result<AppConfig, ProtoError> {
        AppConfig::new(self.kind, self.interval_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeployCase {
    /// Remove the last application: delete the running image.
    Decommission,
    NoOp,
    Reconfigure,
    StartStored,
    SendAndStart,
}

impl DeployCase {
    /// Number used in decision log lines; 0 for decommissioning.
    pub fn number(self) -> u8 {
        match self {
            DeployCase::Decommission => 0,
            DeployCase::NoOp => 1,
            DeployCase::Reconfigure => 2,
            DeployCase::StartStored => 3,
            DeployCase::SendAndStart => 4,
        }
    }
}

/// What confirms a plan step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ack {
    ProgOk,
    Stored(FirmwareId),
    Deleted(FirmwareId),
    /// INFO announcing this firmware after the restart.
    Info(FirmwareId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub frame: Frame,
    pub ack: Ack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentPlan {
    pub node: NodeId,
    pub case: DeployCase,
    /// Firmware started, reconfigured or deleted.
    pub firmware: Option<FirmwareId>,
    pub steps: Vec<PlanStep>,
}

/// What the controller knows about one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeView {
    pub node: NodeId,
    pub running: Option<FirmwareId>,
    pub intervals: Vec<(AppKind, u32)>,
    pub sd: BTreeSet<FirmwareId>,
    pub battery_pct: u8,
}

impl NodeView {
    /// Applications currently running, presence included.
    pub fn configs(&self) -> Vec<AppConfig> {
        let mut out: Vec<AppConfig> = self
            .intervals
            .iter()
            .filter_map(|&(k, i)| AppConfig::periodic(k, i).ok())
            .collect();
        if self.running.is_some_and(|f| f.contains(AppKind::Presence)) {
            out.push(AppConfig::presence());
        }
        out
    }
}

/// Highest reported battery above the threshold; ties go to the lowest id.
pub fn select_node(candidates: &[NodeView], exclude: Option<NodeId>) -> Result<NodeId, ControllerError> {
    candidates
        .iter()
        .filter(|v| Some(v.node) != exclude && v.battery_pct > LOW_BATTERY_PCT)
        .max_by(|a, b| a.battery_pct.cmp(&b.battery_pct).then(b.node.cmp(&a.node)))
        .map(|v| v.node)
        .ok_or(ControllerError::NoEligibleNode)
}

fn reconfigure(view: &NodeView, firmware: FirmwareId, configs: &[AppConfig]) -> Result<DeploymentPlan, ControllerError> {
    let periodic: Vec<AppConfig> = configs.iter().copied().filter(|c| c.interval_s().is_some()).collect();
    let schedule = build_schedule(&periodic)?;
    Ok(DeploymentPlan {
        node: view.node,
        case: DeployCase::Reconfigure,
        firmware: Some(firmware),
        steps: vec![PlanStep {
            frame: Frame::ScheduleUpdate { schedule },
            ack: Ack::ProgOk,
        }],
    })
}

fn start(view: &NodeView, target: FirmwareId) -> DeploymentPlan {
    let mut steps = Vec::new();
    let case = if view.sd.contains(&target) {
        DeployCase::StartStored
    } else {
        steps.push(PlanStep {
            frame: Frame::OtaSend {
                firmware: target,
                size_bytes: image_size(target),
            },
            ack: Ack::Stored(target),
        });
        DeployCase::SendAndStart
    };
    steps.push(PlanStep {
        frame: Frame::OtaStart { firmware: target },
        ack: Ack::Info(target),
    });
    DeploymentPlan {
        node: view.node,
        case,
        firmware: Some(target),
        steps,
    }
}

fn noop(view: &NodeView) -> DeploymentPlan {
    DeploymentPlan {
        node: view.node,
        case: DeployCase::NoOp,
        firmware: view.running,
        steps: Vec::new(),
    }
}

/// Chooses how to add `request` to what the node already runs.
pub fn plan_deployment(view: &NodeView, request: &AppConfig) -> Result<DeploymentPlan, ControllerError> {
    let kind = request.kind();
    let mut desired = view.configs();
    desired.push(*request);
    match view.running {
        Some(f) if f.contains(kind) => match request.interval_s() {
            None => Ok(noop(view)),
            Some(i) if view.intervals.contains(&(kind, i)) => Ok(noop(view)),
            Some(_) => reconfigure(view, f, &desired),
        },
        running => {
            let target = running.map_or(FirmwareId::new(kind.bit()).expect("single app"), |f| f.with(kind));
            Ok(start(view, target))
        }
    }
}

/// Plan that brings the node to exactly `desired`, used after removals and
/// to settle intervals after a restart.
pub fn plan_transition(view: &NodeView, desired: &[AppConfig]) -> Result<DeploymentPlan, ControllerError> {
    if desired.is_empty() {
        return Ok(match view.running {
            None => noop(view),
            Some(f) => DeploymentPlan {
                node: view.node,
                case: DeployCase::Decommission,
                firmware: Some(f),
                steps: vec![PlanStep {
                    frame: Frame::OtaDelete { firmware: f },
                    ack: Ack::Deleted(f),
                }],
            },
        });
    }
    let target = firmware_of(desired.iter().map(AppConfig::kind))?;
    if view.running != Some(target) {
        return Ok(start(view, target));
    }
    let wanted: Vec<(AppKind, u32)> = desired
        .iter()
        .filter_map(|c| c.interval_s().map(|i| (c.kind(), i)))
        .collect();
    if minimal_intervals(&wanted) == minimal_intervals(&view.intervals) || wanted.is_empty() {
        Ok(noop(view))
    } else {
        reconfigure(view, target, desired)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Listen windows to wait for an acknowledgement before resending.
    pub ack_timeout_windows: u32,
    pub max_retries: u32,
    pub draws: CurrentDraws,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            ack_timeout_windows: 3,
            max_retries: 1,
            draws: CurrentDraws::default(),
        }
    }
}

pub type InstanceId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Departure {
    /// The oldest live instance of this kind.
    Kind(AppKind),
    Instance(InstanceId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerAction {
    Send { dst: NodeId, frame: Frame },
    Log(LogRecord),
    ScheduleDeparture { at_ms: u64, instance: InstanceId },
}

#[derive(Debug, Clone)]
struct Instance {
    config: AppConfig,
    node: Option<NodeId>,
    active: bool,
    departed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Intent {
    Admit(InstanceId),
    Remove(Vec<InstanceId>),
}

#[derive(Debug, Clone)]
struct InFlight {
    plan: DeploymentPlan,
    step: usize,
    /// Listen windows seen since the current step went out.
    waited: Option<u32>,
    retries: u32,
    intent: Option<Intent>,
}

#[derive(Debug, Clone, Default)]
struct Slot {
    admitted: Vec<InstanceId>,
    queue: VecDeque<Intent>,
    inflight: Option<InFlight>,
    low_handled: bool,
}

impl Slot {
    fn busy(&self) -> bool {
        self.inflight.is_some() || !self.queue.is_empty()
    }
}

struct Fw(Option<FirmwareId>);

impl fmt::Display for Fw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(id) => write!(f, "{id}"),
            None => f.write_str("none"),
        }
    }
}

pub struct Controller {
    cfg: ControllerConfig,
    store: Store,
    coordinator: NodeId,
    slots: BTreeMap<NodeId, Slot>,
    instances: BTreeMap<InstanceId, Instance>,
    next_instance: InstanceId,
    now_ms: u64,
    out: Vec<ControllerAction>,
}

impl Controller {
    pub fn new(coordinator: NodeId, store: Store, cfg: ControllerConfig) -> Self {
        Controller {
            cfg,
            store,
            coordinator,
            slots: BTreeMap::new(),
            instances: BTreeMap::new(),
            next_instance: 1,
            now_ms: 0,
            out: Vec::new(),
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn into_store(self) -> Store {
        self.store
    }

    /// True while the node has a plan in flight or queued.
    pub fn is_busy(&self, node: NodeId) -> bool {
        self.slots.get(&node).is_some_and(Slot::busy)
    }

    /// Applications admitted to `node`, including ones still being deployed.
    pub fn admitted(&self, node: NodeId) -> Vec<AppConfig> {
        self.slots
            .get(&node)
            .map(|s| s.admitted.iter().map(|i| self.instances[i].config).collect())
            .unwrap_or_default()
    }

    /// Registers a freshly deployed node and the images on its SD card.
    ///
    /// Any device row or SD listing left by an earlier run is replaced;
    /// stored readings are kept.
    pub fn register_node(
        &mut self,
        node: NodeId,
        battery_pct: u8,
        listen_interval_min: u32,
        sd: &BTreeSet<FirmwareId>,
    ) -> Result<(), ControllerError> {
        self.store.upsert_device(DeviceRow::new(node, battery_pct, listen_interval_min))?;
        let known = self.store.sd_contents(node);
        for &f in known.difference(sd) {
            self.store.remove_sd_entry(node, f)?;
        }
        for &f in sd.difference(&known) {
            self.store.record_sd_contents(node, f)?;
        }
        self.slots.entry(node).or_default();
        Ok(())
    }

    pub fn view(&self, node: NodeId) -> NodeView {
        let row = self.store.device(node);
        NodeView {
            node,
            running: row.and_then(|r| r.firmware_id),
            intervals: row.map(|r| r.sensing_intervals.clone()).unwrap_or_default(),
            sd: self.store.sd_contents(node),
            battery_pct: row.map_or(0, |r| r.battery_pct),
        }
    }

    fn views(&self) -> Vec<NodeView> {
        self.slots.keys().map(|&n| self.view(n)).collect()
    }

    fn log(&mut self, kind: &'static str, src: impl ToString, dst: impl ToString, detail: impl Into<String>) {
        self.out
            .push(ControllerAction::Log(LogRecord::new(self.now_ms, kind, src, dst, detail)));
    }

    fn begin(&mut self, now_ms: u64) {
        self.now_ms = now_ms;
    }

    fn finish(&mut self) -> Vec<ControllerAction> {
        std::mem::take(&mut self.out)
    }

    pub fn on_app_arrival(&mut self, now_ms: u64, request: AppRequest) -> Vec<ControllerAction> {
        self.begin(now_ms);
        match request.config() {
            Err(e) => self.log("REJECT", "-", "-", format!("app={} reason={e}", request.kind.name())),
            Ok(config) => {
                let id = self.next_instance;
                self.next_instance += 1;
                self.instances.insert(
                    id,
                    Instance {
                        config,
                        node: None,
                        active: false,
                        departed: false,
                    },
                );
                if let Some(s) = request.activity_s {
                    self.out.push(ControllerAction::ScheduleDeparture {
                        at_ms: now_ms + s * 1000,
                        instance: id,
                    });
                }
                self.place(id, None);
            }
        }
        self.finish()
    }

    /// Picks a node for an instance and queues its admission there.
    fn place(&mut self, id: InstanceId, exclude: Option<NodeId>) {
        let kind = self.instances[&id].config.kind();
        match select_node(&self.views(), exclude) {
            Ok(node) => {
                self.instances.get_mut(&id).expect("instance").node = Some(node);
                let pct = self.view(node).battery_pct;
                let what = if exclude.is_some() { "REALLOC" } else { "ASSIGN" };
                self.log(
                    what,
                    exclude.map_or("-".to_string(), |n| n.to_string()),
                    node,
                    format!("app={} instance={id} battery={pct}", kind.name()),
                );
                self.slots.get_mut(&node).expect("slot").queue.push_back(Intent::Admit(id));
                self.start_next(node);
            }
            Err(_) => {
                self.instances.remove(&id);
                let what = if exclude.is_some() { "UNDEPLOYABLE" } else { "REJECT" };
                self.log(what, exclude.map_or("-".to_string(), |n| n.to_string()), "-", format!("app={} reason=no-eligible-node", kind.name()));
            }
        }
    }

    pub fn on_app_departure(&mut self, now_ms: u64, departure: Departure) -> Vec<ControllerAction> {
        self.begin(now_ms);
        let id = match departure {
            Departure::Instance(id) => Some(id).filter(|i| self.instances.get(i).is_some_and(|x| !x.departed)),
            Departure::Kind(kind) => self
                .instances
                .iter()
                .find(|(_, x)| x.config.kind() == kind && !x.departed)
                .map(|(&i, _)| i),
        };
        let Some(id) = id else {
            self.log("WARN", "-", "-", "departure of an application that is not deployed");
            return self.finish();
        };
        let inst = self.instances.get_mut(&id).expect("instance");
        inst.departed = true;
        let node = inst.node;
        let kind = inst.config.kind();
        self.log(
            "DEPART",
            "-",
            node.map_or("-".to_string(), |n| n.to_string()),
            format!("app={} instance={id}", kind.name()),
        );
        if let Some(node) = node {
            let slot = self.slots.get_mut(&node).expect("slot");
            let queued = slot.queue.iter().position(|i| *i == Intent::Admit(id));
            match queued {
                Some(p) => {
                    slot.queue.remove(p);
                    self.instances.remove(&id);
                }
                None => {
                    slot.queue.push_back(Intent::Remove(vec![id]));
                    self.start_next(node);
                }
            }
        }
        self.finish()
    }

    pub fn on_frame(&mut self, now_ms: u64, src: NodeId, frame: &Frame) -> Vec<ControllerAction> {
        self.begin(now_ms);
        if !self.slots.contains_key(&src) {
            self.log("WARN", src, self.coordinator, format!("frame from unregistered node: {frame}"));
            return self.finish();
        }
        match frame {
            Frame::Listen => self.on_listen(src),
            Frame::Info {
                firmware,
                sensor_intervals,
                listen_interval_min,
            } => {
                let mut row = self.row(src);
                row.firmware_id = Some(*firmware);
                row.sensing_intervals = sensor_intervals.clone();
                row.listen_interval_min = *listen_interval_min;
                self.upsert(row);
                self.acked(src, &Ack::Info(*firmware));
            }
            Frame::ProgOk => {
                let schedule = self.current_step(src).and_then(|s| match (&s.frame, &s.ack) {
                    (Frame::ScheduleUpdate { schedule }, Ack::ProgOk) => Some(schedule.clone()),
                    _ => None,
                });
                match schedule {
                    Some(s) => {
                        let mut row = self.row(src);
                        row.sensing_intervals = Schedule::app_intervals(&s);
                        self.upsert(row);
                        self.acked(src, &Ack::ProgOk);
                    }
                    None => self.log("WARN", src, self.coordinator, "unexpected PROGOK"),
                }
            }
            Frame::SensorData { readings, battery_pct } => {
                let mut row = self.row(src);
                row.battery_pct = battery_pct.get();
                let firmware = row.firmware_id;
                self.upsert(row);
                match firmware {
                    Some(f) => {
                        if let Err(e) = self.store.insert_register(src, f, now_ms, readings.clone(), battery_pct.get()) {
                            self.log("WARN", src, self.coordinator, format!("register not stored: {e}"));
                        }
                    }
                    None => self.log("WARN", src, self.coordinator, "data from a node with no known firmware"),
                }
                self.on_battery(src, battery_pct.get());
            }
            other => self.log("WARN", src, self.coordinator, format!("unexpected {} from node", other.name())),
        }
        self.finish()
    }

    /// The image sent to `node` is now on its SD card.
    pub fn on_transfer_complete(&mut self, now_ms: u64, node: NodeId, firmware: FirmwareId) -> Vec<ControllerAction> {
        self.begin(now_ms);
        if !self.store.sd_contents(node).contains(&firmware) {
            if let Err(e) = self.store.record_sd_contents(node, firmware) {
                self.log("WARN", self.coordinator, node, format!("sd entry not stored: {e}"));
            }
        }
        self.acked(node, &Ack::Stored(firmware));
        self.finish()
    }

    /// The node deleted an image.
    pub fn on_deleted(&mut self, now_ms: u64, node: NodeId, firmware: FirmwareId) -> Vec<ControllerAction> {
        self.begin(now_ms);
        if let Err(e) = self.store.remove_sd_entry(node, firmware) {
            self.log("WARN", self.coordinator, node, format!("sd entry not removed: {e}"));
        }
        let mut row = self.row(node);
        if row.firmware_id == Some(firmware) {
            row.firmware_id = None;
            row.sensing_intervals.clear();
            self.upsert(row);
        }
        self.acked(node, &Ack::Deleted(firmware));
        self.finish()
    }

    fn row(&self, node: NodeId) -> DeviceRow {
        self.store.device(node).cloned().unwrap_or_else(|| DeviceRow::new(node, 0, 1))
    }

    fn upsert(&mut self, row: DeviceRow) {
        let id = row.device_id;
        if let Err(e) = self.store.upsert_device(row) {
            self.log("WARN", self.coordinator, id, format!("device row not stored: {e}"));
        }
    }

    fn current_step(&self, node: NodeId) -> Option<&PlanStep> {
        let f = self.slots.get(&node)?.inflight.as_ref()?;
        f.plan.steps.get(f.step)
    }

    fn on_listen(&mut self, node: NodeId) {
        let timeout = self.cfg.ack_timeout_windows;
        let max_retries = self.cfg.max_retries;
        let Some(f) = self.slots.get_mut(&node).and_then(|s| s.inflight.as_mut()) else {
            return;
        };
        match f.waited {
            None => {}
            Some(w) if w + 1 < timeout => {
                f.waited = Some(w + 1);
                return;
            }
            Some(_) if f.retries < max_retries => {
                f.retries += 1;
                let step = f.plan.steps[f.step].frame.name();
                self.log("RETRY", self.coordinator, node, format!("step={step}"));
            }
            Some(_) => {
                self.fail(node, "ack timeout");
                return;
            }
        }
        let slot = self.slots.get_mut(&node).expect("slot");
        let f = slot.inflight.as_mut().expect("inflight");
        f.waited = Some(0);
        let frame = f.plan.steps[f.step].frame.clone();
        self.out.push(ControllerAction::Send {
            dst: node,
            frame: Frame::FrameKindNotice { class: frame.class() },
        });
        self.out.push(ControllerAction::Send { dst: node, frame });
    }

    fn acked(&mut self, node: NodeId, ack: &Ack) {
        let slot = self.slots.get_mut(&node).expect("slot");
        let Some(f) = slot.inflight.as_mut() else {
            return;
        };
        if f.waited.is_none() || f.plan.steps.get(f.step).map(|s| &s.ack) != Some(ack) {
            return;
        }
        f.step += 1;
        f.waited = None;
        f.retries = 0;
        if f.step == f.plan.steps.len() {
            self.complete(node);
        }
    }

    fn complete(&mut self, node: NodeId) {
        let slot = self.slots.get_mut(&node).expect("slot");
        let f = slot.inflight.take().expect("inflight");
        let case = f.plan.case;
        self.log("DONE", format!("case={}", case.number()), format!("node={node}"), format!("fw={}", Fw(f.plan.firmware)));
        if let Some(Intent::Admit(id)) = f.intent {
            if let Some(inst) = self.instances.get_mut(&id) {
                inst.active = true;
            }
        }
        if case == DeployCase::Decommission {
            self.log("IDLE", node, "-", "no firmware running");
        }
        self.reconcile_or_next(node);
    }

    fn fail(&mut self, node: NodeId, reason: &str) {
        let slot = self.slots.get_mut(&node).expect("slot");
        let f = slot.inflight.take().expect("inflight");
        if let Some(Intent::Admit(id)) = f.intent {
            slot.admitted.retain(|&i| i != id);
            self.instances.remove(&id);
        }
        let step = f.plan.steps[f.step].frame.name();
        self.log("FAIL", format!("case={}", f.plan.case.number()), format!("node={node}"), format!("step={step} reason={reason}"));
        self.start_next(node);
    }

    /// After a plan, align the node's intervals with what is admitted.
    fn reconcile_or_next(&mut self, node: NodeId) {
        let desired = self.admitted(node);
        let view = self.view(node);
        match plan_transition(&view, &desired) {
            Ok(plan) if plan.case != DeployCase::NoOp => self.launch(plan, None),
            Ok(_) => self.start_next(node),
            Err(e) => {
                self.log("WARN", self.coordinator, node, format!("cannot settle node: {e}"));
                self.start_next(node);
            }
        }
    }

    fn launch(&mut self, plan: DeploymentPlan, intent: Option<Intent>) {
        let node = plan.node;
        self.log("DECIDE", format!("case={}", plan.case.number()), format!("node={node}"), format!("fw={}", Fw(plan.firmware)));
        self.slots.get_mut(&node).expect("slot").inflight = Some(InFlight {
            plan,
            step: 0,
            waited: None,
            retries: 0,
            intent,
        });
    }

    fn start_next(&mut self, node: NodeId) {
        loop {
            let slot = self.slots.get_mut(&node).expect("slot");
            if slot.inflight.is_some() {
                return;
            }
            let Some(intent) = slot.queue.pop_front() else {
                return;
            };
            let view = self.view(node);
            let planned = match &intent {
                Intent::Admit(id) => {
                    let Some(inst) = self.instances.get(id).filter(|i| !i.departed) else {
                        continue;
                    };
                    let config = inst.config;
                    self.slots.get_mut(&node).expect("slot").admitted.push(*id);
                    plan_deployment(&view, &config)
                }
                Intent::Remove(ids) => {
                    self.slots.get_mut(&node).expect("slot").admitted.retain(|i| !ids.contains(i));
                    for i in ids {
                        self.instances.remove(i);
                    }
                    let desired = self.admitted(node);
                    plan_transition(&view, &desired)
                }
            };
            match planned {
                Ok(plan) if plan.case == DeployCase::NoOp => {
                    self.log("DECIDE", "case=1", format!("node={node}"), format!("fw={}", Fw(plan.firmware)));
                    if let Intent::Admit(id) = intent {
                        self.instances.get_mut(&id).expect("instance").active = true;
                    }
                }
                Ok(plan) => {
                    self.launch(plan, Some(intent));
                    return;
                }
                Err(e) => {
                    self.log("FAIL", "-", format!("node={node}"), format!("reason={e}"));
                    if let Intent::Admit(id) = intent {
                        self.slots.get_mut(&node).expect("slot").admitted.retain(|&i| i != id);
                        self.instances.remove(&id);
                    }
                }
            }
        }
    }

    fn on_battery(&mut self, node: NodeId, pct: u8) {
        let slot = self.slots.get_mut(&node).expect("slot");
        if pct >= LOW_BATTERY_PCT {
            slot.low_handled = false;
            return;
        }
        if slot.low_handled || slot.busy() || slot.admitted.is_empty() {
            return;
        }
        slot.low_handled = true;
        let admitted = self.admitted(node);
        let victim = app_energy_rank(&admitted, &self.cfg.draws)[0];
        let slot = self.slots.get_mut(&node).expect("slot");
        let ids: Vec<InstanceId> = slot
            .admitted
            .iter()
            .copied()
            .filter(|i| self.instances[i].config.kind() == victim)
            .collect();
        self.log("EVICT", node, "-", format!("app={} battery={pct}", victim.name()));
        // Re-admit each victim as a fresh request elsewhere, then shrink the source.
        let mut moved = Vec::new();
        for &id in &ids {
            let config = self.instances[&id].config;
            let fresh = self.next_instance;
            self.next_instance += 1;
            self.instances.insert(
                fresh,
                Instance {
                    config,
                    node: None,
                    active: false,
                    departed: false,
                },
            );
            moved.push(fresh);
        }
        self.slots.get_mut(&node).expect("slot").queue.push_back(Intent::Remove(ids));
        self.start_next(node);
        for fresh in moved {
            self.place(fresh, Some(node));
        }
    }
}
