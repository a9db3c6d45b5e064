//! Built-in verification networks.
//!
//! `parallel` is the two-node closed network: links `a`/`c` (mode 1) and
//! `b`/`d` (mode 2) run in opposite directions between nodes 1 and 2.
//!
//! `multimodal` is the drive/bike network between nodes 1 and 4. Path 1 drives
//! `1 → 2` and walks to 4; path 2 picks up a bike at node 1, rides to the
//! station at node 3 and walks to 4. The reverse direction mirrors it.
//! Capacities: parking at node 2 (`1-`), bikes at 1 (`2p-`), docks at 3
//! (`2d-`), bikes at 3 (`2p+`) and docks at 1 (`2d+`).

use crate::capacity::{CapacityProvenance, CapacityVector, Coefficients, EfficiencyModel};
use crate::choice::Dispersion;
use crate::network::{build_network, CapacityChannel, ChoiceSet, Link, Mode, Network, Node, Od, Route, RouteKey};

/// Dispersion used in the verification experiments.
pub const THETA_VERIFICATION: f64 = 0.0905;

pub fn parallel_network() -> Network {
    build_network(
        vec![Node::new("1"), Node::new("2")],
        vec![Mode::new(0, "walk"), Mode::new(1, "car"), Mode::new(2, "bike")],
        vec![
            Link::new("a", "1", "2", 1, 30.0, CapacityChannel::Vehicle),
            Link::new("b", "1", "2", 2, 35.0, CapacityChannel::Vehicle),
            Link::new("c", "2", "1", 1, 30.0, CapacityChannel::Space),
            Link::new("d", "2", "1", 2, 35.0, CapacityChannel::Space),
        ],
    )
    .expect("parallel preset is well formed")
}

pub fn parallel_choice_sets(network: &Network) -> Vec<ChoiceSet> {
    let fwd = Od::new("1", "2");
    let rev = Od::new("2", "1");
    let route = |od: &Od, id: &str| Route::new(network, od.clone(), RouteKey::new(id, id), &[id]).unwrap();
    vec![
        ChoiceSet::new(fwd.clone(), vec![route(&fwd, "a"), route(&fwd, "b")]).unwrap(),
        ChoiceSet::new(rev.clone(), vec![route(&rev, "c"), route(&rev, "d")]).unwrap(),
    ]
}

/// Shared per-mode coefficients for the parallel network, taken from the drive
/// and bike pick-up rows of the verification estimates.
pub fn parallel_efficiency() -> EfficiencyModel {
    EfficiencyModel::default()
        .with_mode(1, Coefficients::new(0.5526, 0.6636, 0.0, 0.0))
        .with_mode(2, Coefficients::new(0.3959, 0.2964, 0.0, 0.0))
}

pub fn multimodal_network() -> Network {
    use CapacityChannel::{None, Space, Vehicle};
    build_network(
        ["1", "2", "3", "4", "1b", "3b"].into_iter().map(Node::new).collect(),
        vec![Mode::new(0, "walk"), Mode::new(1, "drive"), Mode::new(2, "bike")],
        vec![
            Link::new("1-", "1", "2", 1, 20.0, Space),
            Link::new("1+", "2", "1", 1, 20.0, None),
            Link::new("3-", "2", "4", 0, 10.0, None),
            Link::new("3+", "4", "2", 0, 10.0, None),
            Link::new("2p-", "1", "1b", 2, 0.0, Vehicle),
            Link::new("2d-", "1b", "3", 2, 25.0, Space),
            Link::new("4-", "3", "4", 0, 10.0, None),
            Link::new("4+", "4", "3", 0, 10.0, None),
            Link::new("2p+", "3", "3b", 2, 0.0, Vehicle),
            Link::new("2d+", "3b", "1", 2, 25.0, Space),
        ],
    )
    .expect("multimodal preset is well formed")
}

/// Forward OD (1, 4) with paths (1, 3) and (2, 4); reverse OD (4, 1).
pub fn multimodal_choice_sets(network: &Network) -> Vec<ChoiceSet> {
    let fwd = Od::new("1", "4");
    let rev = Od::new("4", "1");
    let r = |od: &Od, key: (&str, &str), links: &[&str]| {
        Route::new(network, od.clone(), RouteKey::new(key.0, key.1), links).unwrap()
    };
    vec![
        ChoiceSet::new(
            fwd.clone(),
            vec![
                r(&fwd, ("1", "3"), &["1-", "3-"]),
                r(&fwd, ("2", "4"), &["2p-", "2d-", "4-"]),
            ],
        )
        .unwrap(),
        ChoiceSet::new(
            rev.clone(),
            vec![
                r(&rev, ("3", "1"), &["3+", "1+"]),
                r(&rev, ("4", "2"), &["4+", "2p+", "2d+"]),
            ],
        )
        .unwrap(),
    ]
}

/// Per-link coefficients reproducing the verification estimates.
///
/// Each link's four aggregates collapse onto two distinct flows; the
/// combined effect is stored on the first term of each alias group, so a
/// drop-off link's own-direction effect appears as a negative IT value.
pub fn multimodal_efficiency() -> EfficiencyModel {
    EfficiencyModel::default()
        // u1- += 0.5526·x1+ − 0.6636·x1-
        .with_link("1-", Coefficients::new(0.5526, 0.6636, 0.0, 0.0))
        // u2p- += 0.3959·x2+ − 0.2964·x2-
        .with_link("2p-", Coefficients::new(0.3959, 0.2964, 0.0, 0.0))
        // u2d- += −0.3759·x2- + 0.5020·x2+
        .with_link("2d-", Coefficients::new(-0.3759, 0.0, 0.0, 0.5020))
        // u2p+ += 0.2029·x2- − 0.2710·x2+
        .with_link("2p+", Coefficients::new(0.2029, 0.2710, 0.0, 0.0))
        // u2d+ += −0.3570·x2+ + 0.2673·x2-
        .with_link("2d+", Coefficients::new(-0.3570, 0.0, 0.0, 0.2673))
}

pub fn verification_dispersion(network: &Network) -> Dispersion {
    Dispersion::uniform(network, THETA_VERIFICATION)
}

/// The same capacity on every capacitated link.
pub fn uniform_capacity(network: &Network, interval: i64, value: f64) -> CapacityVector {
    let mut v = CapacityVector::new(interval, CapacityProvenance::ObservedIntervalEnd);
    for l in network.capacitated_links() {
        v.capacities.insert(l, value);
    }
    v
}
