//! Directed multimodal graph, routes and choice sets.
//!
//! Incidence sets are computed once at construction. For a link `a` they
//! hold the other links of the same mode that touch `a`'s end nodes:
//!
//! * `inbound_tail`  (I_T): links whose head is `a`'s tail
//! * `outbound_tail` (O_T): links leaving `a`'s tail, excluding `a`
//! * `inbound_head`  (I_H): links entering `a`'s head, excluding `a`
//! * `outbound_head` (O_H): links whose tail is `a`'s head
//!
//! The link itself is never stored in its own sets; the capacity model adds
//! the link's own flow to the O_T and I_H aggregates (see
//! [`crate::capacity::flow_aggregates`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ModeIdx = u32;

/// Dense position of a link inside a [`Network`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkIdx(pub usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mode {
    pub index: ModeIdx,
    pub label: String,
}

impl Mode {
    pub fn new(index: ModeIdx, label: impl Into<String>) -> Self {
        Self {
            index,
            label: label.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapacityChannel {
    None,
    /// Capacity counts vehicles available (e.g. bikes at a dock).
    Vehicle,
    /// Capacity counts free spaces (e.g. empty docks, parking).
    Space,
}

impl CapacityChannel {
    pub fn is_capacitated(self) -> bool {
        !matches!(self, CapacityChannel::None)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CapacityChannel::None => "none",
            CapacityChannel::Vehicle => "vehicle",
            CapacityChannel::Space => "space",
        }
    }
}

impl std::str::FromStr for CapacityChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" | "none" => Ok(CapacityChannel::None),
            "vehicle" => Ok(CapacityChannel::Vehicle),
            "space" => Ok(CapacityChannel::Space),
            other => Err(Error::InvalidInput(format!("unknown capacity channel {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
}

impl Node {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            lat: None,
            lon: None,
        }
    }

    pub fn at(id: impl Into<String>, lat: f64, lon: f64) -> Self {
        Self {
            id: id.into(),
            lat: Some(lat),
            lon: Some(lon),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: String,
    pub tail: String,
    pub head: String,
    pub mode: ModeIdx,
    /// Generalized cost, e.g. minutes.
    pub cost: f64,
    pub capacity_channel: CapacityChannel,
    /// Virtual links at a single node (tail == head) must opt in explicitly.
    #[serde(default)]
    pub self_loop: bool,
}

impl Link {
    pub fn new(
        id: impl Into<String>,
        tail: impl Into<String>,
        head: impl Into<String>,
        mode: ModeIdx,
        cost: f64,
        capacity_channel: CapacityChannel,
    ) -> Self {
        Self {
            id: id.into(),
            tail: tail.into(),
            head: head.into(),
            mode,
            cost,
            capacity_channel,
            self_loop: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Incidence {
    pub inbound_tail: Vec<LinkIdx>,
    pub outbound_tail: Vec<LinkIdx>,
    pub inbound_head: Vec<LinkIdx>,
    pub outbound_head: Vec<LinkIdx>,
}

#[derive(Clone, Debug)]
pub struct Network {
    nodes: Vec<Node>,
    node_index: HashMap<String, usize>,
    links: Vec<Link>,
    link_index: HashMap<String, LinkIdx>,
    modes: Vec<Mode>,
    incidence: Vec<Incidence>,
}

fn default_mode_label(index: ModeIdx) -> String {
    if index == 0 {
        "walk".to_string()
    } else {
        format!("mode{index}")
    }
}

/// Builds a network and its incidence sets.
///
/// `modes` may be empty, in which case modes are inferred from the links
/// (mode 0 is labelled `walk`). Mode indices must be dense from 0.
pub fn build_network(nodes: Vec<Node>, modes: Vec<Mode>, links: Vec<Link>) -> Result<Network> {
    let mut node_index = HashMap::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        if node_index.insert(node.id.clone(), i).is_some() {
            return Err(Error::DuplicateNode(node.id.clone()));
        }
    }

    let mut link_index = HashMap::with_capacity(links.len());
    for (i, link) in links.iter().enumerate() {
        if link_index.insert(link.id.clone(), LinkIdx(i)).is_some() {
            return Err(Error::DuplicateLink(link.id.clone()));
        }
        for end in [&link.tail, &link.head] {
            if !node_index.contains_key(end) {
                return Err(Error::DanglingNode {
                    link: link.id.clone(),
                    node: end.clone(),
                });
            }
        }
        if !(link.cost >= 0.0) || !link.cost.is_finite() {
            return Err(Error::InvalidLink {
                link: link.id.clone(),
                reason: format!("cost must be finite and nonnegative, got {}", link.cost),
            });
        }
        if link.tail == link.head && !link.self_loop {
            return Err(Error::InvalidLink {
                link: link.id.clone(),
                reason: "tail equals head but link is not flagged as a self-loop".into(),
            });
        }
    }

    let modes = resolve_modes(modes, &links)?;
    let incidence = compute_incidence(&links);

    Ok(Network {
        nodes,
        node_index,
        links,
        link_index,
        modes,
        incidence,
    })
}

fn resolve_modes(declared: Vec<Mode>, links: &[Link]) -> Result<Vec<Mode>> {
    let used: BTreeSet<ModeIdx> = links.iter().map(|l| l.mode).collect();
    let mut modes = declared;
    if modes.is_empty() {
        let max = used.iter().next_back().copied().unwrap_or(0);
        modes = (0..=max).map(|m| Mode::new(m, default_mode_label(m))).collect();
    }
    modes.sort_by_key(|m| m.index);
    for (i, mode) in modes.iter().enumerate() {
        if mode.index as usize != i {
            return Err(Error::InvalidModes(format!(
                "expected mode index {i}, found {}",
                mode.index
            )));
        }
    }
    if let Some(&m) = used.iter().find(|&&m| m as usize >= modes.len()) {
        return Err(Error::InvalidModes(format!("link uses undeclared mode {m}")));
    }
    Ok(modes)
}

fn compute_incidence(links: &[Link]) -> Vec<Incidence> {
    // (mode, node) -> links by tail / by head, in link order.
    let mut by_tail: HashMap<(ModeIdx, &str), Vec<LinkIdx>> = HashMap::new();
    let mut by_head: HashMap<(ModeIdx, &str), Vec<LinkIdx>> = HashMap::new();
    for (i, link) in links.iter().enumerate() {
        by_tail
            .entry((link.mode, link.tail.as_str()))
            .or_default()
            .push(LinkIdx(i));
        by_head
            .entry((link.mode, link.head.as_str()))
            .or_default()
            .push(LinkIdx(i));
    }
    let empty = Vec::new();
    let lookup = |map: &HashMap<(ModeIdx, &str), Vec<LinkIdx>>, mode, node: &str, own| {
        map.get(&(mode, node))
            .unwrap_or(&empty)
            .iter()
            .copied()
            .filter(|&l| l != own)
            .collect::<Vec<_>>()
    };

    links
        .iter()
        .enumerate()
        .map(|(i, link)| {
            let own = LinkIdx(i);
            Incidence {
                inbound_tail: lookup(&by_head, link.mode, &link.tail, own),
                outbound_tail: lookup(&by_tail, link.mode, &link.tail, own),
                inbound_head: lookup(&by_head, link.mode, &link.head, own),
                outbound_head: lookup(&by_tail, link.mode, &link.head, own),
            }
        })
        .collect()
}

impl Network {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn link(&self, idx: LinkIdx) -> &Link {
        &self.links[idx.0]
    }

    pub fn link_id(&self, idx: LinkIdx) -> &str {
        &self.links[idx.0].id
    }

    pub fn link_index(&self, id: &str) -> Option<LinkIdx> {
        self.link_index.get(id).copied()
    }

    pub fn require_link(&self, id: &str) -> Result<LinkIdx> {
        self.link_index(id)
            .ok_or_else(|| Error::UnknownLink(id.to_string()))
    }

    pub fn has_node(&self, id: &str) -> bool {
        self.node_index.contains_key(id)
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.node_index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn incidence(&self, idx: LinkIdx) -> &Incidence {
        &self.incidence[idx.0]
    }

    pub fn link_indices(&self) -> impl Iterator<Item = LinkIdx> + '_ {
        (0..self.links.len()).map(LinkIdx)
    }

    /// Links with a congestible capacity, in link order.
    pub fn capacitated_links(&self) -> impl Iterator<Item = LinkIdx> + '_ {
        self.link_indices()
            .filter(move |&l| self.links[l.0].capacity_channel.is_capacitated())
    }

    pub fn capacitated_links_of_mode(&self, mode: ModeIdx) -> Vec<LinkIdx> {
        self.capacitated_links()
            .filter(|&l| self.links[l.0].mode == mode)
            .collect()
    }

    pub fn contains(&self, idx: LinkIdx) -> bool {
        idx.0 < self.links.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Od {
    pub origin: String,
    pub destination: String,
}

impl Od {
    pub fn new(origin: impl Into<String>, destination: impl Into<String>) -> Self {
        Self {
            origin: origin.into(),
            destination: destination.into(),
        }
    }
}

impl fmt::Display for Od {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.origin, self.destination)
    }
}

/// External label of a route, e.g. the (pickup, drop-off) station pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RouteKey {
    pub start: String,
    pub end: String,
}

impl RouteKey {
    pub fn new(start: impl Into<String>, end: impl Into<String>) -> Self {
        Self {
            start: start.into(),
            end: end.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub od: Od,
    pub key: RouteKey,
    pub links: Vec<LinkIdx>,
    /// Links of the route grouped by mode.
    pub mode_partition: BTreeMap<ModeIdx, Vec<LinkIdx>>,
}

impl Route {
    /// Builds a route from link ids and checks it against the network.
    pub fn new(network: &Network, od: Od, key: RouteKey, link_ids: &[&str]) -> Result<Route> {
        let links = link_ids
            .iter()
            .map(|id| network.require_link(id))
            .collect::<Result<Vec<_>>>()?;
        let route = Route::from_indices(network, od, key, links);
        if let Err(violation) = validate_route(&route, network) {
            return Err(Error::InvalidRoute {
                origin: route.od.origin.clone(),
                destination: route.od.destination.clone(),
                reason: violation.to_string(),
            });
        }
        Ok(route)
    }

    /// Builds a route without validating connectivity. Links must exist.
    pub fn from_indices(network: &Network, od: Od, key: RouteKey, links: Vec<LinkIdx>) -> Route {
        let mut mode_partition: BTreeMap<ModeIdx, Vec<LinkIdx>> = BTreeMap::new();
        for &l in &links {
            mode_partition
                .entry(network.link(l).mode)
                .or_default()
                .push(l);
        }
        Route {
            od,
            key,
            links,
            mode_partition,
        }
    }

    pub fn cost(&self, network: &Network) -> f64 {
        self.links.iter().map(|&l| network.link(l).cost).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RouteViolation {
    UnknownLink(usize),
    OriginMismatch { expected: String, found: String },
    DestinationMismatch { expected: String, found: String },
    Gap { position: usize, from: String, to: String },
    PartitionMissing { link: String },
    PartitionWrongMode { link: String, listed: ModeIdx },
    PartitionExtra { link: String },
}

impl fmt::Display for RouteViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouteViolation::UnknownLink(i) => write!(f, "link index {i} is not in the network"),
            RouteViolation::OriginMismatch { expected, found } => {
                write!(f, "route starts at {found}, expected origin {expected}")
            }
            RouteViolation::DestinationMismatch { expected, found } => {
                write!(f, "route ends at {found}, expected destination {expected}")
            }
            RouteViolation::Gap { position, from, to } => write!(
                f,
                "gap at junction {position}: head of {from} does not meet tail of {to}"
            ),
            RouteViolation::PartitionMissing { link } => {
                write!(f, "mode partition omits link {link}")
            }
            RouteViolation::PartitionWrongMode { link, listed } => {
                write!(f, "link {link} listed under mode {listed} in the partition")
            }
            RouteViolation::PartitionExtra { link } => {
                write!(f, "mode partition lists {link} which is not on the route")
            }
        }
    }
}

/// Returns the first connectivity or membership violation of `route`.
pub fn validate_route(route: &Route, network: &Network) -> std::result::Result<(), RouteViolation> {
    for &l in &route.links {
        if !network.contains(l) {
            return Err(RouteViolation::UnknownLink(l.0));
        }
    }
    if let Some(&first) = route.links.first() {
        let tail = &network.link(first).tail;
        if *tail != route.od.origin {
            return Err(RouteViolation::OriginMismatch {
                expected: route.od.origin.clone(),
                found: tail.clone(),
            });
        }
    }
    for (i, pair) in route.links.windows(2).enumerate() {
        let (a, b) = (network.link(pair[0]), network.link(pair[1]));
        if a.head != b.tail {
            return Err(RouteViolation::Gap {
                position: i + 1,
                from: a.id.clone(),
                to: b.id.clone(),
            });
        }
    }
    if let Some(&last) = route.links.last() {
        let head = &network.link(last).head;
        if *head != route.od.destination {
            return Err(RouteViolation::DestinationMismatch {
                expected: route.od.destination.clone(),
                found: head.clone(),
            });
        }
    }

    let mut listed: BTreeMap<LinkIdx, usize> = BTreeMap::new();
    for (&mode, links) in &route.mode_partition {
        for &l in links {
            if !network.contains(l) {
                return Err(RouteViolation::UnknownLink(l.0));
            }
            if network.link(l).mode != mode {
                return Err(RouteViolation::PartitionWrongMode {
                    link: network.link_id(l).to_string(),
                    listed: mode,
                });
            }
            *listed.entry(l).or_default() += 1;
        }
    }
    let mut on_route: BTreeMap<LinkIdx, usize> = BTreeMap::new();
    for &l in &route.links {
        *on_route.entry(l).or_default() += 1;
    }
    for (l, &n) in &on_route {
        if listed.get(l).copied().unwrap_or(0) < n {
            return Err(RouteViolation::PartitionMissing {
                link: network.link_id(*l).to_string(),
            });
        }
    }
    for (l, &n) in &listed {
        if on_route.get(l).copied().unwrap_or(0) < n {
            return Err(RouteViolation::PartitionExtra {
                link: network.link_id(*l).to_string(),
            });
        }
    }
    Ok(())
}

/// Per-mode sum of link costs along a route; modes absent from the route map to 0.
pub fn route_mode_costs(route: &Route, network: &Network) -> Result<BTreeMap<ModeIdx, f64>> {
    let mut costs: BTreeMap<ModeIdx, f64> = network.modes().iter().map(|m| (m.index, 0.0)).collect();
    for &l in &route.links {
        if !network.contains(l) {
            return Err(Error::UnknownLink(format!("#{}", l.0)));
        }
        let link = network.link(l);
        *costs.entry(link.mode).or_default() += link.cost;
    }
    Ok(costs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceSet {
    pub od: Od,
    pub routes: Vec<Route>,
}

impl ChoiceSet {
    pub fn new(od: Od, routes: Vec<Route>) -> Result<ChoiceSet> {
        if routes.is_empty() {
            return Err(Error::EmptyChoiceSet {
                origin: od.origin,
                destination: od.destination,
            });
        }
        if let Some(r) = routes.iter().find(|r| r.od != od) {
            return Err(Error::InvalidRoute {
                origin: r.od.origin.clone(),
                destination: r.od.destination.clone(),
                reason: format!("route does not belong to choice set OD {od}"),
            });
        }
        Ok(ChoiceSet { od, routes })
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn position(&self, key: &RouteKey) -> Option<usize> {
        self.routes.iter().position(|r| &r.key == key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Network {
        build_network(
            vec![Node::new("1"), Node::new("2"), Node::new("3")],
            vec![],
            vec![
                Link::new("a", "1", "2", 0, 1.0, CapacityChannel::None),
                Link::new("b", "2", "3", 0, 2.0, CapacityChannel::None),
            ],
        )
        .unwrap()
    }

    #[test]
    fn chain_incidence() {
        let net = chain();
        let a = net.link_index("a").unwrap();
        let b = net.link_index("b").unwrap();
        let inc_a = net.incidence(a);
        assert!(inc_a.inbound_head.is_empty());
        assert_eq!(inc_a.outbound_head, vec![b]);
        assert!(inc_a.inbound_tail.is_empty());
        assert_eq!(net.incidence(b).inbound_tail, vec![a]);
    }

    #[test]
    fn isolated_link_has_empty_incidence() {
        let net = build_network(
            vec![Node::new("x"), Node::new("y")],
            vec![],
            vec![Link::new("only", "x", "y", 0, 1.0, CapacityChannel::None)],
        )
        .unwrap();
        assert_eq!(net.incidence(LinkIdx(0)), &Incidence::default());
    }

    #[test]
    fn rejects_dangling_and_duplicate() {
        let err = build_network(
            vec![Node::new("1")],
            vec![],
            vec![Link::new("a", "1", "9", 0, 1.0, CapacityChannel::None)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DanglingNode { .. }));

        let err = build_network(
            vec![Node::new("1"), Node::new("2")],
            vec![],
            vec![
                Link::new("a", "1", "2", 0, 1.0, CapacityChannel::None),
                Link::new("a", "2", "1", 0, 1.0, CapacityChannel::None),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateLink(id) if id == "a"));
    }

    #[test]
    fn self_loop_needs_flag() {
        let mut link = Link::new("loop", "1", "1", 0, 0.0, CapacityChannel::Vehicle);
        assert!(build_network(vec![Node::new("1")], vec![], vec![link.clone()]).is_err());
        link.self_loop = true;
        assert!(build_network(vec![Node::new("1")], vec![], vec![link]).is_ok());
    }

    #[test]
    fn negative_cost_rejected() {
        let err = build_network(
            vec![Node::new("1"), Node::new("2")],
            vec![],
            vec![Link::new("a", "1", "2", 0, -1.0, CapacityChannel::None)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidLink { .. }));
    }

    #[test]
    fn sparse_modes_rejected() {
        let err = build_network(
            vec![Node::new("1"), Node::new("2")],
            vec![Mode::new(0, "walk"), Mode::new(2, "bike")],
            vec![Link::new("a", "1", "2", 2, 1.0, CapacityChannel::None)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidModes(_)));
    }

    fn two_mode() -> Network {
        build_network(
            vec![Node::new("o"), Node::new("p"), Node::new("q"), Node::new("d")],
            vec![Mode::new(0, "walk"), Mode::new(1, "bike")],
            vec![
                Link::new("w1", "o", "p", 0, 3.0, CapacityChannel::None),
                Link::new("b", "p", "q", 1, 9.0, CapacityChannel::Vehicle),
                Link::new("w2", "q", "d", 0, 2.0, CapacityChannel::None),
            ],
        )
        .unwrap()
    }

    #[test]
    fn mode_costs_two_modes() {
        let net = two_mode();
        let route = Route::new(&net, Od::new("o", "d"), RouteKey::new("p", "q"), &["w1", "b", "w2"]).unwrap();
        let costs = route_mode_costs(&route, &net).unwrap();
        assert_eq!(costs[&0], 5.0);
        assert_eq!(costs[&1], 9.0);
    }

    #[test]
    fn empty_route_costs_zero() {
        let net = two_mode();
        let route = Route::from_indices(&net, Od::new("o", "o"), RouteKey::new("-", "-"), vec![]);
        assert!(validate_route(&route, &net).is_ok());
        let costs = route_mode_costs(&route, &net).unwrap();
        assert!(costs.values().all(|&c| c == 0.0));
        assert_eq!(costs.len(), 2);
    }

    #[test]
    fn unknown_link_in_costs() {
        let net = two_mode();
        let mut route = Route::from_indices(&net, Od::new("o", "d"), RouteKey::new("p", "q"), vec![]);
        route.links.push(LinkIdx(42));
        assert!(route_mode_costs(&route, &net).is_err());
        assert_eq!(validate_route(&route, &net), Err(RouteViolation::UnknownLink(42)));
    }

    #[test]
    fn validate_detects_gap() {
        let net = two_mode();
        let w1 = net.link_index("w1").unwrap();
        let w2 = net.link_index("w2").unwrap();
        let route = Route::from_indices(&net, Od::new("o", "d"), RouteKey::new("p", "q"), vec![w1, w2]);
        match validate_route(&route, &net) {
            Err(RouteViolation::Gap { position, from, to }) => {
                assert_eq!((position, from.as_str(), to.as_str()), (1, "w1", "w2"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_detects_partition_omission() {
        let net = two_mode();
        let mut route =
            Route::new(&net, Od::new("o", "d"), RouteKey::new("p", "q"), &["w1", "b", "w2"]).unwrap();
        route.mode_partition.get_mut(&1).unwrap().clear();
        assert_eq!(
            validate_route(&route, &net),
            Err(RouteViolation::PartitionMissing { link: "b".into() })
        );
    }

    #[test]
    fn validate_detects_wrong_endpoints() {
        let net = two_mode();
        let route = Route::new(&net, Od::new("p", "d"), RouteKey::new("p", "q"), &["w1", "b", "w2"]);
        assert!(route.is_err());
    }

    #[test]
    fn choice_set_requires_routes() {
        assert!(matches!(
            ChoiceSet::new(Od::new("o", "d"), vec![]),
            Err(Error::EmptyChoiceSet { .. })
        ));
    }
}
