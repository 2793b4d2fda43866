use ssn_core::netsim::{NodeId, SimConfig, Simulation};
use ssn_core::proto::{AppKind, FirmwareId};
use ssn_core::scenario::{bundled, Scenario};
use ssn_core::store::{RegisterQuery, Store};

fn fw(id: u8) -> FirmwareId {
    FirmwareId::new(id).unwrap()
}

fn simulate(text: &str, store: Store, until_ms: u64) -> Simulation {
    let sc = Scenario::parse(text).unwrap();
    let mut sim = sc.build(SimConfig::default(), store).unwrap();
    sim.run_until(until_ms);
    let v = sim.check_invariants();
    assert!(v.is_empty(), "{v:#?}");
    sim
}

fn kinds<'a>(sim: &'a Simulation, kind: &'a str) -> impl Iterator<Item = String> + 'a {
    sim.log().records().iter().filter(move |r| r.kind == kind).map(|r| r.to_string())
}

#[test]
fn sent_images_are_recorded_on_the_device() {
    let sim = simulate(bundled("mesh_demo").unwrap(), Store::in_memory(), 1_200_000);
    let sd = sim.store().sd_contents(NodeId(3));
    for id in [4, 12, 13] {
        assert!(sd.contains(&fw(id)), "missing fw {id}: {sd:?}");
    }
    assert_eq!(sim.node(NodeId(3)).unwrap().sd_images(), sd);
}

#[test]
fn activity_time_removes_the_app_again() {
    // temperature arrives at 600 s for 300 s on the end device
    let sim = simulate(bundled("mesh_demo").unwrap(), Store::in_memory(), 1_500_000);
    assert!(kinds(&sim, "DEPART").any(|l| l.contains("app=temperature")));
    let node = sim.node(NodeId(3)).unwrap();
    assert_eq!(node.running(), Some(fw(12)));
    assert_eq!(node.intervals(), vec![(AppKind::Luminosity, 30)]);
}

#[test]
fn disk_store_reloads_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(bundled("realloc_demo").unwrap(), Store::open(dir.path()).unwrap(), 900_000);
    let live = sim.into_store();
    let reloaded = Store::open(dir.path()).unwrap();
    reloaded.validate().unwrap();
    assert_eq!(reloaded.registers(), live.registers());
    assert_eq!(reloaded.devices().collect::<Vec<_>>(), live.devices().collect::<Vec<_>>());
    for n in 1..=3 {
        assert_eq!(reloaded.sd_contents(NodeId(n)), live.sd_contents(NodeId(n)));
    }
    // ids are gapless and increasing
    assert!(live.registers().iter().enumerate().all(|(i, r)| r.id == i as u64 + 1));
    let q = RegisterQuery {
        device: Some(NodeId(2)),
        app: Some(AppKind::Humidity),
        ..RegisterQuery::default()
    };
    assert!(!live.query(&q).is_empty());
}

#[test]
fn single_app_node_is_emptied_when_its_battery_runs_low() {
    let sim = simulate(
        "node 0 coordinator\nnode 1 router sd=all battery=100\nnode 2 router sd=all battery=90\nlink 0 1\nlink 0 2\n\
         arrive 2 temperature 10\nbattery 150 1 19\n",
        Store::in_memory(),
        600_000,
    );
    assert!(kinds(&sim, "EVICT").any(|l| l.contains("app=temperature")));
    assert!(kinds(&sim, "REALLOC").any(|l| l.contains("\t1\t2\t")));
    assert!(kinds(&sim, "IDLE").any(|l| l.contains("\t1\t")));
    assert_eq!(sim.node(NodeId(1)).unwrap().running(), None);
    assert_eq!(sim.node(NodeId(2)).unwrap().running(), Some(fw(1)));
}

#[test]
fn threshold_is_strict() {
    let sim = simulate(
        "node 0 coordinator\nnode 1 router sd=all battery=100\nnode 2 router sd=all battery=90\nlink 0 1\nlink 0 2\n\
         arrive 2 temperature 10\narrive 70 humidity 10\nbattery 200 1 21\n",
        Store::in_memory(),
        600_000,
    );
    assert_eq!(kinds(&sim, "EVICT").count(), 0);
    assert_eq!(sim.node(NodeId(1)).unwrap().running(), Some(fw(3)));
}

#[test]
fn no_eligible_peer_leaves_the_app_undeployable() {
    let sim = simulate(
        "node 0 coordinator\nnode 1 router sd=all battery=100\nnode 2 router sd=all battery=15\nlink 0 1\nlink 0 2\n\
         arrive 2 temperature 10\narrive 70 humidity 10\nbattery 200 1 19\n",
        Store::in_memory(),
        600_000,
    );
    assert!(kinds(&sim, "UNDEPLOYABLE").any(|l| l.contains("app=humidity")));
    assert_eq!(sim.node(NodeId(1)).unwrap().running(), Some(fw(1)));
    assert_eq!(sim.node(NodeId(2)).unwrap().running(), None);
}
