//! Acceptance suite: one check per criterion, each printing a single
//! PASS/FAIL line. Run with `cargo test -p ssn-core --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssn_core::controller::{plan_deployment, DeployCase, NodeView};
use ssn_core::energy::{duty_cycle_of, lifetime, CurrentDraws, EnergyRole, NodeEnergyConfig};
use ssn_core::netsim::{LinkModel, NodeId, SimConfig, Simulation, Topology, MEASURED_IMAGES};
use ssn_core::proto::{apps_of, build_schedule, firmware_of, AppConfig, AppKind, FirmwareId};
use ssn_core::scenario::{Scenario, BUNDLED};
use ssn_core::store::Store;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn fw(id: u8) -> FirmwareId {
    FirmwareId::new(id).unwrap()
}

fn within(actual: f64, expected: f64, rel: f64) -> bool {
    ((actual - expected) / expected).abs() <= rel
}

fn budget(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        Err(format!("{what} took {took:?}, budget {limit:?}"))
    } else {
        Ok(())
    }
}

/// Rows of the codification table, columns PIR, luminosity, humidity, temperature.
const CODIFICATION: [[bool; 4]; 15] = [
    [false, false, false, true],
    [false, false, true, false],
    [false, false, true, true],
    [false, true, false, false],
    [false, true, false, true],
    [false, true, true, false],
    [false, true, true, true],
    [true, false, false, false],
    [true, false, false, true],
    [true, false, true, false],
    [true, false, true, true],
    [true, true, false, false],
    [true, true, false, true],
    [true, true, true, false],
    [true, true, true, true],
];

fn c1_codification() -> Outcome {
    let start = Instant::now();
    let cols = [AppKind::Presence, AppKind::Luminosity, AppKind::Humidity, AppKind::Temperature];
    let mut seen = BTreeSet::new();
    for (row, marks) in CODIFICATION.iter().enumerate() {
        let id = row as u32 + 1;
        let set: BTreeSet<AppKind> = cols.iter().zip(marks).filter(|(_, &m)| m).map(|(&k, _)| k).collect();
        let got = firmware_of(set.iter().copied()).map_err(|e| e.to_string())?;
        if got.get() as u32 != id {
            return Err(format!("{set:?} encodes to {got}, table says {id}"));
        }
        if apps_of(id).map_err(|e| e.to_string())? != set {
            return Err(format!("firmware {id} decodes to the wrong set"));
        }
        seen.insert(got);
    }
    if seen.len() != 15 {
        return Err("encoding is not injective".into());
    }
    if apps_of(0).is_ok() || apps_of(16).is_ok() || firmware_of([]).is_ok() {
        return Err("out-of-range ids or the empty set were accepted".into());
    }
    budget(start, Duration::from_secs(1), "codification check")?;
    Ok("15/15 subsets match the table in both directions".into())
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Firing bits at every instant of `cycles` hyperperiods, straight from divisibility.
fn divisibility_oracle(configs: &[AppConfig], cycles: u64) -> (u64, Vec<u8>) {
    let h = configs
        .iter()
        .filter_map(|c| c.interval_s())
        .fold(1u64, |acc, i| acc / gcd(acc, i as u64) * i as u64);
    let fires = (0..cycles * h)
        .map(|t| {
            configs
                .iter()
                .filter(|c| c.interval_s().is_some_and(|i| t % i as u64 == 0))
                .fold(0u8, |b, c| b | c.kind().bit())
        })
        .collect();
    (h, fires)
}

fn c2_schedule_codec() -> Outcome {
    let start = Instant::now();
    let example = [
        AppConfig::periodic(AppKind::Temperature, 5).unwrap(),
        AppConfig::periodic(AppKind::Humidity, 10).unwrap(),
        AppConfig::periodic(AppKind::Luminosity, 15).unwrap(),
    ];
    let s = build_schedule(&example).map_err(|e| e.to_string())?;
    let ix: Vec<u8> = s.indices().iter().map(|f| f.get()).collect();
    if s.intervals() != [5; 6] || ix != [7, 1, 3, 5, 3, 1, 7] {
        return Err(format!("example gives {:?} / {ix:?}", s.intervals()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let periodic = [AppKind::Temperature, AppKind::Humidity, AppKind::Luminosity];
    for case in 0..1000 {
        let n = rng.gen_range(1..=4);
        let configs: Vec<AppConfig> = (0..n)
            .map(|_| AppConfig::periodic(periodic[rng.gen_range(0..3)], rng.gen_range(1..=40)).unwrap())
            .collect();
        let s = build_schedule(&configs).map_err(|e| format!("case {case} {configs:?}: {e}"))?;
        let (h, oracle) = divisibility_oracle(&configs, 3);
        if s.hyperperiod() != h {
            return Err(format!("case {case}: hyperperiod {} vs {h}", s.hyperperiod()));
        }
        let offsets = s.offsets();
        let mut from_schedule = vec![0u8; oracle.len()];
        for cycle in 0..3 {
            for (j, off) in offsets.iter().enumerate() {
                from_schedule[(cycle * h + off) as usize] = s.indices()[j].get();
            }
        }
        if from_schedule != oracle {
            return Err(format!("case {case} {configs:?}: firing instants differ from the oracle"));
        }
        if s.indices()[offsets.len()] != s.indices()[0] {
            return Err(format!("case {case}: cycle does not close on its first index"));
        }
    }
    budget(start, Duration::from_secs(10), "schedule check")?;
    Ok("example exact; 1000 random configs match the divisibility oracle over 3 hyperperiods".into())
}

fn temp10(role: EnergyRole) -> NodeEnergyConfig {
    NodeEnergyConfig::new(role, vec![AppConfig::periodic(AppKind::Temperature, 10).unwrap()], Some(1))
}

fn c3_energy_anchors() -> Outcome {
    let start = Instant::now();
    let draws = CurrentDraws::default();
    let router = lifetime(&temp10(EnergyRole::Router), &draws).map_err(|e| e.to_string())?;
    let end = lifetime(&temp10(EnergyRole::EndDevice), &draws).map_err(|e| e.to_string())?;
    if !within(router, 5.96, 0.02) || !within(end, 129.58, 0.02) {
        return Err(format!("router {router:.3} d, end device {end:.3} d"));
    }
    budget(start, Duration::from_secs(1), "energy check")?;
    Ok(format!("router {router:.2} d (5.96), end device {end:.2} d (129.58)"))
}

fn c4_duty_cycle() -> Outcome {
    let d = duty_cycle_of(&temp10(EnergyRole::Router)).map_err(|e| e.to_string())?;
    let checks = [
        ("t_sleep", d.t_sleep, 0.9807, 0.0005),
        ("t_sense", d.t_sense, 0.002, 0.000005),
        ("t_send", d.t_send, 0.00033, 0.000005),
        ("t_recv", d.t_recv, 0.00016, 0.000005),
        ("t_listen", d.t_listen_window, 0.01667, 0.000005),
    ];
    for (name, got, want, tol) in checks {
        if (got - want).abs() > tol {
            return Err(format!("{name} = {got:.6}, expected {want} +/- {tol}"));
        }
    }
    Ok(format!(
        "sleep {:.5} sense {:.5} send {:.5} recv {:.5} listen {:.5}",
        d.t_sleep, d.t_sense, d.t_send, d.t_recv, d.t_listen_window
    ))
}

fn c5_update_times() -> Outcome {
    let expected = [(1u8, 115.0, 5.53), (3, 129.0, 5.31), (7, 132.0, 5.2), (15, 134.0, 5.17)];
    let link = LinkModel::default();
    let topo = Topology::builder().coordinator(0).router(1).link(0, 1).build().map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for (id, secs, kbps) in expected {
        let (desc, t) = link.ota_transfer_to(&topo, NodeId(1), fw(id)).map_err(|e| e.to_string())?;
        let measured = MEASURED_IMAGES.iter().find(|m| m.0 == id).unwrap();
        if (desc.frame_count, desc.size_bytes) != (measured.1, measured.2) {
            return Err(format!("fw {id}: descriptor {desc:?} does not match the shipped image"));
        }
        if t.bytes_sent != desc.frame_count as u64 * 81 {
            return Err(format!("fw {id}: bytes_sent {} != frames x 81", t.bytes_sent));
        }
        let rate = t.effective_rate_bps / 1000.0;
        if !within(t.duration_s, secs, 0.05) || !within(rate, kbps, 0.05) {
            return Err(format!("fw {id}: {:.1} s / {rate:.2} kbps vs {secs} s / {kbps} kbps", t.duration_s));
        }
        summary.push(format!("fw{id} {:.1}s {rate:.2}kbps", t.duration_s));
    }
    Ok(summary.join(", "))
}

/// The case the allocation flow prescribes, written out independently.
fn expected_case(running: FirmwareId, kind: AppKind, same_interval: bool, stored: bool) -> DeployCase {
    if running.contains(kind) {
        if kind == AppKind::Presence || same_interval {
            DeployCase::NoOp
        } else {
            DeployCase::Reconfigure
        }
    } else if stored {
        DeployCase::StartStored
    } else {
        DeployCase::SendAndStart
    }
}

fn c6_case_coverage() -> Outcome {
    let mut combos = 0;
    let mut per_case: BTreeMap<u8, usize> = BTreeMap::new();
    for running in FirmwareId::all() {
        for kind in AppKind::ALL {
            for same in [true, false] {
                for stored in [true, false] {
                    let intervals: Vec<(AppKind, u32)> =
                        running.apps().into_iter().filter(|k| *k != AppKind::Presence).map(|k| (k, 10)).collect();
                    let target = running.with(kind);
                    let mut sd = BTreeSet::from([running]);
                    if stored {
                        sd.insert(target);
                    } else if target != running {
                        sd.remove(&target);
                    }
                    let view = NodeView {
                        node: NodeId(1),
                        running: Some(running),
                        intervals,
                        sd,
                        battery_pct: 80,
                    };
                    let interval = (kind != AppKind::Presence).then_some(if same { 10 } else { 15 });
                    let req = AppConfig::new(kind, interval).unwrap();
                    let plan = plan_deployment(&view, &req).map_err(|e| format!("{running}/{kind}: {e}"))?;
                    let want = expected_case(running, kind, same, stored);
                    if plan.case != want {
                        return Err(format!(
                            "running {running}, {kind} same={same} stored={stored}: {:?}, expected {want:?}",
                            plan.case
                        ));
                    }
                    combos += 1;
                    *per_case.entry(plan.case.number()).or_default() += 1;
                }
            }
        }
    }
    if combos != 240 {
        return Err(format!("{combos} combinations enumerated"));
    }

    // the three outcomes named in the allocation description
    let t5 = AppConfig::periodic(AppKind::Temperature, 5).unwrap();
    let view = NodeView {
        node: NodeId(1),
        running: Some(fw(1)),
        intervals: vec![(AppKind::Temperature, 5)],
        sd: BTreeSet::from([fw(1)]),
        battery_pct: 80,
    };
    let noop = plan_deployment(&view, &t5).map_err(|e| e.to_string())?;
    if noop.case != DeployCase::NoOp || !noop.steps.is_empty() {
        return Err(format!("identical config gave {noop:?}"));
    }
    let lum_node = NodeView {
        node: NodeId(1),
        running: Some(fw(4)),
        intervals: vec![(AppKind::Luminosity, 10)],
        sd: FirmwareId::all().collect(),
        battery_pct: 80,
    };
    let hum = AppConfig::periodic(AppKind::Humidity, 10).unwrap();
    let six = plan_deployment(&lum_node, &hum).map_err(|e| e.to_string())?;
    if six.case != DeployCase::StartStored || six.firmware != Some(fw(6)) || six.steps.len() != 1 {
        return Err(format!("luminosity + humidity gave {six:?}"));
    }
    let bare = NodeView {
        sd: BTreeSet::from([fw(4)]),
        ..lum_node
    };
    let send = plan_deployment(&bare, &hum).map_err(|e| e.to_string())?;
    if send.case != DeployCase::SendAndStart || send.steps.len() != 2 {
        return Err(format!("absent image gave {send:?}"));
    }
    Ok(format!("240 combinations, cases {per_case:?}; NoOp / fw 6 start / send-and-start as described"))
}

fn run_bundled(name: &str, until_ms: u64) -> Result<Simulation, String> {
    let text = BUNDLED.iter().find(|(n, _)| *n == name).ok_or(format!("no scenario {name}"))?.1;
    let sc = Scenario::parse(text).map_err(|e| e.to_string())?;
    let mut sim = sc.build(SimConfig::default(), Store::in_memory()).map_err(|e| e.to_string())?;
    sim.run_until(until_ms);
    Ok(sim)
}

fn fields(line: &str) -> Vec<&str> {
    line.split('\t').collect()
}

fn c7_reallocation() -> Outcome {
    let sim = run_bundled("realloc_demo", 900_000)?;
    let log = sim.log().to_text();
    let lines: Vec<Vec<&str>> = log.lines().filter(|l| !l.starts_with('#')).map(fields).collect();
    let pos = |pred: &dyn Fn(&[&str]) -> bool| lines.iter().position(|f| pred(f));

    let running_before = pos(&|f| f[1] == "RESTART" && f[2] == "1" && f[4] == "fw=3").ok_or("node 1 never ran fw 3")?;
    let low = pos(&|f| f[1] == "BATTERY" && f[2] == "1").ok_or("no battery record")?;
    let evict = pos(&|f| f[1] == "EVICT" && f[2] == "1").ok_or("no eviction")?;
    if !lines[evict][4].contains("app=humidity") {
        return Err(format!("evicted {}", lines[evict][4]));
    }
    let reprogram = lines[evict..]
        .iter()
        .position(|f| f[1] == "DECIDE" && f[3] == "node=1" && f[4] == "fw=1")
        .map(|i| i + evict)
        .ok_or("no decision to run fw 1 on node 1 after the eviction")?;
    let realloc = pos(&|f| f[1] == "REALLOC" && f[2] == "1").ok_or("no reallocation")?;
    if lines[realloc][3] != "2" || !lines[realloc][4].contains("app=humidity") {
        return Err(format!("reallocated as {:?}", lines[realloc]));
    }
    if !(running_before < low && low < evict && evict <= reprogram) {
        return Err("records out of order".into());
    }
    // node 2 reported 90%, node 3 60%: node 2 is the best charged peer
    let n1 = sim.node(NodeId(1)).ok_or("node 1 missing")?;
    let n2 = sim.node(NodeId(2)).ok_or("node 2 missing")?;
    if n1.running() != Some(fw(1)) || n2.running() != Some(fw(2)) {
        return Err(format!("final firmware: node 1 {:?}, node 2 {:?}", n1.running(), n2.running()));
    }
    if n2.intervals() != vec![(AppKind::Humidity, 10)] {
        return Err(format!("node 2 intervals {:?}", n2.intervals()));
    }
    let violations = sim.check_invariants();
    if !violations.is_empty() {
        return Err(violations.join("; "));
    }
    Ok("humidity evicted at 19%, node 1 back on fw 1, humidity redeployed to node 2 (90%)".into())
}

fn c8_simulator_properties() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    for (name, text) in BUNDLED {
        let sc = Scenario::parse(text).map_err(|e| e.to_string())?;
        let mut events = sc.clone();
        events.events.extend(sc.generate_pir(42, 1_800_000, 6.0));
        let run = |sc: &Scenario| -> Result<Simulation, String> {
            let mut sim = sc.build(SimConfig::default(), Store::in_memory()).map_err(|e| e.to_string())?;
            sim.run_until(1_800_000);
            Ok(sim)
        };
        let a = run(&events)?;
        let b = run(&events)?;
        if a.log().to_text() != b.log().to_text() {
            return Err(format!("{name}: two runs produced different logs"));
        }
        let c = a.frame_counts();
        if c.sent != c.delivered + c.buffered + c.dropped + c.in_flight {
            return Err(format!("{name}: frame accounting {c:?}"));
        }
        // end devices only ever talk to their parent
        let topo = a.topology();
        for line in a.log().to_text().lines().filter(|l| l.contains("\tSEND\t")) {
            let f = fields(line);
            let path: Vec<u32> = f[4]
                .split_whitespace()
                .find_map(|w| w.strip_prefix("path="))
                .ok_or(format!("{name}: SEND without path"))?
                .split('-')
                .map(|x| x.parse().unwrap())
                .collect();
            for (i, &hop) in path.iter().enumerate() {
                let spec = topo.get(NodeId(hop)).ok_or("unknown node in path")?;
                if let Some(parent) = spec.parent {
                    let neighbours: Vec<u32> = [i.checked_sub(1), Some(i + 1)]
                        .into_iter()
                        .flatten()
                        .filter_map(|j| path.get(j).copied())
                        .collect();
                    if neighbours.iter().any(|&n| n != parent.0) {
                        return Err(format!("{name}: end device {hop} linked to a non-parent in {path:?}"));
                    }
                }
            }
        }
        let violations = a.check_invariants();
        if !violations.is_empty() {
            return Err(format!("{name}: {}", violations.join("; ")));
        }
        notes.push(format!("{name} {} frames", c.sent));
    }
    budget(start, Duration::from_secs(30), "simulator properties")?;
    Ok(format!("conservation, parent-only and determinism hold: {}", notes.join(", ")))
}

fn c9_throughput() -> Outcome {
    let link = LinkModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let standard = [1_200u32, 2_400, 4_800, 9_600, 19_200, 38_400, 57_600, 115_200, 230_400];
    let mut samples: Vec<(u32, u32)> = standard.iter().flat_map(|&c| standard.iter().map(move |&n| (c, n))).collect();
    samples.extend((0..1000).map(|_| (rng.gen_range(300..=1_000_000), rng.gen_range(300..=1_000_000))));
    let mut peak: f64 = 0.0;
    for (coord_bps, node_bps) in samples {
        let mut topo = Topology::builder()
            .coordinator(0)
            .router(1)
            .end_device(2, 1)
            .link(0, 1)
            .build()
            .map_err(|e| e.to_string())?;
        topo.set_serial_bps(NodeId(0), coord_bps).map_err(|e| e.to_string())?;
        topo.set_serial_bps(NodeId(1), node_bps).map_err(|e| e.to_string())?;
        topo.set_serial_bps(NodeId(2), node_bps).map_err(|e| e.to_string())?;
        let one = link.max_throughput(&topo, NodeId(0), NodeId(1)).map_err(|e| e.to_string())?;
        let two = link.max_throughput(&topo, NodeId(0), NodeId(2)).map_err(|e| e.to_string())?;
        if two > one + 1e-9 {
            return Err(format!("serial {coord_bps}/{node_bps}: 2-hop {two:.0} > 1-hop {one:.0}"));
        }
        if one > 35_000.0 || two > 35_000.0 {
            return Err(format!("serial {coord_bps}/{node_bps}: {one:.0} bps over the ceiling"));
        }
        peak = peak.max(one);
    }
    Ok(format!("2-hop <= 1-hop and <= 35 kbps over 1081 serial settings (peak {peak:.0} bps); curve values not reproduced"))
}

fn c10_measured_lifetime() -> Outcome {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md"))
        .map_err(|e| format!("README.md: {e}"))?;
    if !readme.contains("2.65") {
        return Err("README does not document the measured battery figure as out of scope".into());
    }
    let router = lifetime(&temp10(EnergyRole::Router), &CurrentDraws::default()).map_err(|e| e.to_string())?;
    if within(router, 2.65, 0.25) {
        return Err("model has been tuned towards the measured figure".into());
    }
    Ok(format!("not reproducible (hardware effect): out of scope and documented; model stays theoretical at {router:.2} d"))
}

#[test]
fn acceptance() {
    let criteria: [(u8, &str, Check); 10] = [
        (1, "firmware codification bijection", c1_codification),
        (2, "schedule codec", c2_schedule_codec),
        (3, "energy lifetime anchors", c3_energy_anchors),
        (4, "duty-cycle fractions", c4_duty_cycle),
        (5, "OTA update times", c5_update_times),
        (6, "controller case coverage", c6_case_coverage),
        (7, "low-battery reallocation", c7_reallocation),
        (8, "simulator properties", c8_simulator_properties),
        (9, "throughput model", c9_throughput),
        (10, "measured battery figure", c10_measured_lifetime),
    ];
    // written straight to stderr so the lines show without --nocapture
    let mut err = std::io::stderr().lock();
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        let line = match check() {
            Ok(detail) => format!("PASS  {n:>2} {name}: {detail}"),
            Err(why) => {
                failed.push(n);
                format!("FAIL  {n:>2} {name}: {why}")
            }
        };
        writeln!(err, "{line}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
