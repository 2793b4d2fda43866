use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::NetError;

/// Default host-to-radio serial rate of sensor nodes.
pub const NODE_SERIAL_BPS: u32 = 115_200;
/// Serial rate the coordinator gateway must use for OTA programming.
pub const COORDINATOR_SERIAL_BPS: u32 = 38_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Coordinator,
    Router,
    EndDevice,
}

impl Role {
    pub fn parse(s: &str) -> Option<Role> {
        match s.to_ascii_lowercase().as_str() {
            "coordinator" => Some(Role::Coordinator),
            "router" => Some(Role::Router),
            "end_device" | "enddevice" | "end-device" => Some(Role::EndDevice),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Coordinator => "coordinator",
            Role::Router => "router",
            Role::EndDevice => "end_device",
        }
    }

    /// Coordinator and routers relay frames and never sleep their radio.
    pub fn is_mesh(self) -> bool {
        !matches!(self, Role::EndDevice)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub role: Role,
    /// Set for end devices only.
    pub parent: Option<NodeId>,
    pub serial_bps: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("network has no coordinator")]
    NoCoordinator,
    #[error("network has more than one coordinator ({0} and {1})")]
    MultipleCoordinators(NodeId, NodeId),
    #[error("node {0} declared twice")]
    DuplicateNode(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("end device {0} has no parent")]
    MissingParent(NodeId),
    #[error("node {child} cannot have parent {parent}")]
    BadParent { child: NodeId, parent: NodeId },
    #[error("end device {0} cannot hold radio links; it talks through its parent")]
    EndDeviceLink(NodeId),
    #[error("link from {0} to itself")]
    SelfLink(NodeId),
    #[error("node {0} is not reachable from the coordinator")]
    Disconnected(NodeId),
    #[error("serial rate of node {0} must be positive")]
    ZeroSerialRate(NodeId),
}

#[derive(Debug, Default, Clone)]
pub struct TopologyBuilder {
    nodes: Vec<NodeSpec>,
    links: Vec<(NodeId, NodeId)>,
}

impl TopologyBuilder {
    pub fn node(mut self, spec: NodeSpec) -> Self {
        self.nodes.push(spec);
        self
    }

    pub fn coordinator(self, id: u32) -> Self {
        self.node(NodeSpec {
            id: NodeId(id),
            role: Role::Coordinator,
            parent: None,
            serial_bps: COORDINATOR_SERIAL_BPS,
        })
    }

    pub fn router(self, id: u32) -> Self {
        self.node(NodeSpec {
            id: NodeId(id),
            role: Role::Router,
            parent: None,
            serial_bps: NODE_SERIAL_BPS,
        })
    }

    pub fn end_device(self, id: u32, parent: u32) -> Self {
        self.node(NodeSpec {
            id: NodeId(id),
            role: Role::EndDevice,
            parent: Some(NodeId(parent)),
            serial_bps: NODE_SERIAL_BPS,
        })
    }

    pub fn link(mut self, a: u32, b: u32) -> Self {
        self.links.push((NodeId(a), NodeId(b)));
        self
    }

    pub fn build(self) -> Result<Topology, TopologyError> {
        let topo = self.build_unchecked()?;
        topo.check_connected()?;
        Ok(topo)
    }

    /// Builds without requiring the mesh to be connected, for partition experiments.
    pub fn build_unchecked(self) -> Result<Topology, TopologyError> {
        let mut nodes = BTreeMap::new();
        let mut coordinator = None;
        for spec in self.nodes {
            if spec.serial_bps == 0 {
                return Err(TopologyError::ZeroSerialRate(spec.id));
            }
            if spec.role == Role::Coordinator {
                if let Some(prev) = coordinator {
                    return Err(TopologyError::MultipleCoordinators(prev, spec.id));
                }
                coordinator = Some(spec.id);
            }
            if nodes.insert(spec.id, spec.clone()).is_some() {
                return Err(TopologyError::DuplicateNode(spec.id));
            }
        }
        let coordinator = coordinator.ok_or(TopologyError::NoCoordinator)?;

        for spec in nodes.values() {
            match (spec.role, spec.parent) {
                (Role::EndDevice, None) => return Err(TopologyError::MissingParent(spec.id)),
                (Role::EndDevice, Some(p)) => {
                    let parent = nodes.get(&p).ok_or(TopologyError::UnknownNode(p))?;
                    if !parent.role.is_mesh() {
                        return Err(TopologyError::BadParent { child: spec.id, parent: p });
                    }
                }
                (_, Some(p)) => return Err(TopologyError::BadParent { child: spec.id, parent: p }),
                (_, None) => {}
            }
        }

        let mut links = BTreeSet::new();
        for (a, b) in self.links {
            if a == b {
                return Err(TopologyError::SelfLink(a));
            }
            for id in [a, b] {
                let spec = nodes.get(&id).ok_or(TopologyError::UnknownNode(id))?;
                if spec.role == Role::EndDevice {
                    return Err(TopologyError::EndDeviceLink(id));
                }
            }
            links.insert((a.min(b), a.max(b)));
        }
        Ok(Topology {
            nodes,
            links,
            coordinator,
        })
    }
}

/// Static network layout: roles, parent links and the router mesh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    nodes: BTreeMap<NodeId, NodeSpec>,
    links: BTreeSet<(NodeId, NodeId)>,
    coordinator: NodeId,
}

impl Topology {
    pub fn builder() -> TopologyBuilder {
        TopologyBuilder::default()
    }

    pub fn coordinator(&self) -> NodeId {
        self.coordinator
    }

    pub fn get(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values()
    }

    /// Routers and end devices, ascending.
    pub fn sensor_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .values()
            .filter(|s| s.role != Role::Coordinator)
            .map(|s| s.id)
    }

    pub fn links(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.links.iter().copied()
    }

    pub fn serial_bps(&self, id: NodeId) -> Option<u32> {
        self.nodes.get(&id).map(|s| s.serial_bps)
    }

    pub fn set_serial_bps(&mut self, id: NodeId, bps: u32) -> Result<(), TopologyError> {
        if bps == 0 {
            return Err(TopologyError::ZeroSerialRate(id));
        }
        let spec = self.nodes.get_mut(&id).ok_or(TopologyError::UnknownNode(id))?;
        spec.serial_bps = bps;
        Ok(())
    }

    /// Mesh neighbours of a coordinator or router, ascending.
    pub fn mesh_neighbours(&self, id: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .links
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    fn check_connected(&self) -> Result<(), TopologyError> {
        let dist = self.mesh_distances(self.coordinator);
        for spec in self.nodes.values().filter(|s| s.role.is_mesh()) {
            if !dist.contains_key(&spec.id) {
                return Err(TopologyError::Disconnected(spec.id));
            }
        }
        Ok(())
    }

    fn mesh_distances(&self, from: NodeId) -> BTreeMap<NodeId, usize> {
        let mut dist = BTreeMap::from([(from, 0usize)]);
        let mut queue = VecDeque::from([from]);
        while let Some(n) = queue.pop_front() {
            let d = dist[&n];
            for m in self.mesh_neighbours(n) {
                dist.entry(m).or_insert_with(|| {
                    queue.push_back(m);
                    d + 1
                });
            }
        }
        dist
    }

    /// Mesh attachment point of a node: itself, or its parent for end devices.
    fn attachment(&self, id: NodeId) -> Result<NodeId, NetError> {
        let spec = self.nodes.get(&id).ok_or(NetError::UnknownNode(id))?;
        Ok(match spec.role {
            Role::EndDevice => spec.parent.expect("validated end device has a parent"),
            _ => id,
        })
    }

    /// Shortest path by hop count, lowest node id first among equal-length choices.
    ///
    /// End devices appear only as the first or last element, next to their parent.
    pub fn route(&self, src: NodeId, dst: NodeId) -> Result<Vec<NodeId>, NetError> {
        let a = self.attachment(src)?;
        let b = self.attachment(dst)?;
        if src == dst {
            return Ok(vec![src]);
        }
        let dist = self.mesh_distances(b);
        let mut mesh = vec![a];
        let mut cur = a;
        let mut d = *dist.get(&a).ok_or(NetError::NoRoute { src, dst })?;
        while d > 0 {
            cur = self
                .mesh_neighbours(cur)
                .into_iter()
                .find(|n| dist.get(n) == Some(&(d - 1)))
                .expect("BFS distances are consistent");
            mesh.push(cur);
            d -= 1;
        }
        let mut path = Vec::with_capacity(mesh.len() + 2);
        if a != src {
            path.push(src);
        }
        path.extend(mesh);
        if b != dst {
            path.push(dst);
        }
        Ok(path)
    }

    pub fn hops(&self, src: NodeId, dst: NodeId) -> Result<usize, NetError> {
        Ok(self.route(src, dst)?.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<NodeId> {
        v.iter().map(|&i| NodeId(i)).collect()
    }

    #[test]
    fn validation_errors() {
        assert_eq!(Topology::builder().router(1).build(), Err(TopologyError::NoCoordinator));
        assert!(matches!(
            Topology::builder().coordinator(0).coordinator(1).build(),
            Err(TopologyError::MultipleCoordinators(..))
        ));
        assert_eq!(
            Topology::builder().coordinator(0).end_device(2, 9).build(),
            Err(TopologyError::UnknownNode(NodeId(9)))
        );
        assert!(matches!(
            Topology::builder()
                .coordinator(0)
                .router(1)
                .link(0, 1)
                .end_device(2, 1)
                .end_device(3, 2)
                .build(),
            Err(TopologyError::BadParent { .. })
        ));
        assert_eq!(
            Topology::builder().coordinator(0).end_device(2, 0).link(0, 2).build(),
            Err(TopologyError::EndDeviceLink(NodeId(2)))
        );
        assert_eq!(
            Topology::builder().coordinator(0).router(1).build(),
            Err(TopologyError::Disconnected(NodeId(1)))
        );
        assert_eq!(
            Topology::builder().coordinator(0).router(0).build(),
            Err(TopologyError::DuplicateNode(NodeId(0)))
        );
    }

    #[test]
    fn end_device_routes_through_parent() {
        let t = Topology::builder()
            .coordinator(0)
            .router(1)
            .link(0, 1)
            .end_device(2, 1)
            .end_device(3, 0)
            .build()
            .unwrap();
        assert_eq!(t.route(NodeId(0), NodeId(2)).unwrap(), ids(&[0, 1, 2]));
        assert_eq!(t.route(NodeId(2), NodeId(0)).unwrap(), ids(&[2, 1, 0]));
        assert_eq!(t.route(NodeId(3), NodeId(2)).unwrap(), ids(&[3, 0, 1, 2]));
        assert_eq!(t.route(NodeId(3), NodeId(0)).unwrap(), ids(&[3, 0]));
        assert_eq!(t.route(NodeId(1), NodeId(1)).unwrap(), ids(&[1]));
    }

    #[test]
    fn partition_has_no_route() {
        let t = Topology::builder()
            .coordinator(0)
            .router(1)
            .router(2)
            .link(0, 1)
            .build_unchecked()
            .unwrap();
        assert!(matches!(t.route(NodeId(0), NodeId(2)), Err(NetError::NoRoute { .. })));
        assert!(matches!(t.route(NodeId(0), NodeId(7)), Err(NetError::UnknownNode(_))));
    }

    /// Every simple path on a small mesh, to check route() independently.
    fn all_simple_paths(t: &Topology, src: NodeId, dst: NodeId) -> Vec<Vec<NodeId>> {
        fn go(t: &Topology, path: &mut Vec<NodeId>, dst: NodeId, out: &mut Vec<Vec<NodeId>>) {
            let last = *path.last().unwrap();
            if last == dst {
                out.push(path.clone());
                return;
            }
            for n in t.mesh_neighbours(last) {
                if !path.contains(&n) {
                    path.push(n);
                    go(t, path, dst, out);
                    path.pop();
                }
            }
        }
        let mut out = Vec::new();
        go(t, &mut vec![src], dst, &mut out);
        out
    }

    #[test]
    fn shortest_path_matches_enumeration() {
        // 0 - 1 - 3
        // |   |   |
        // 2 --+-- 4
        let t = Topology::builder()
            .coordinator(0)
            .router(1)
            .router(2)
            .router(3)
            .router(4)
            .link(0, 1)
            .link(0, 2)
            .link(1, 3)
            .link(1, 2)
            .link(2, 4)
            .link(3, 4)
            .build()
            .unwrap();
        for s in 0..5 {
            for d in 0..5 {
                let (s, d) = (NodeId(s), NodeId(d));
                let mut paths = all_simple_paths(&t, s, d);
                let min = paths.iter().map(Vec::len).min().unwrap();
                paths.retain(|p| p.len() == min);
                paths.sort();
                assert_eq!(t.route(s, d).unwrap(), paths[0], "{s} -> {d}");
            }
        }
    }
}
