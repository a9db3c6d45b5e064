//! CSV and JSON readers and writers for every file the CLI exchanges.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::capacity::{CapacityProvenance, CapacityVector, EfficiencyModel, FlowSnapshot, IntervalRecord};
use crate::choice::{ChoiceObservation, Dispersion, EstimationReport};
use crate::error::{Error, Result};
use crate::eval::{SurplusRow, VariantReport};
use crate::ingest::{FrameRow, Station, Zone};
use crate::network::{build_network, CapacityChannel, ChoiceSet, Link, Network, Node, Od, Route, RouteKey};
use crate::online::IntervalResult;
use crate::sim::IntervalTruth;

fn display(path: &Path) -> String {
    path.display().to_string()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: display(path),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: display(path),
        source,
    })
}

/// Writes a header even when `rows` is empty.
fn write_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: display(path),
        source,
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: display(path),
        source,
    })
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let csv_err = |source| Error::Csv {
        path: display(path),
        source,
    };
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(csv_err)
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRow {
    id: String,
    #[serde(default)]
    lat: Option<f64>,
    #[serde(default)]
    lon: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LinkRow {
    id: String,
    tail: String,
    head: String,
    mode: u32,
    cost: f64,
    capacity_channel: String,
}

pub fn write_network(dir: &Path, network: &Network) -> Result<()> {
    let nodes: Vec<NodeRow> = network
        .nodes()
        .iter()
        .map(|n| NodeRow {
            id: n.id.clone(),
            lat: n.lat,
            lon: n.lon,
        })
        .collect();
    let links: Vec<LinkRow> = network
        .links()
        .iter()
        .map(|l| LinkRow {
            id: l.id.clone(),
            tail: l.tail.clone(),
            head: l.head.clone(),
            mode: l.mode,
            cost: l.cost,
            capacity_channel: l.capacity_channel.as_str().to_string(),
        })
        .collect();
    write_rows(&dir.join("nodes.csv"), &nodes)?;
    write_rows(&dir.join("links.csv"), &links)
}

/// Reads `nodes.csv` and `links.csv` from `dir`.
pub fn read_network(dir: &Path) -> Result<Network> {
    let nodes: Vec<NodeRow> = read_rows(&dir.join("nodes.csv"))?;
    let links: Vec<LinkRow> = read_rows(&dir.join("links.csv"))?;
    let nodes = nodes
        .into_iter()
        .map(|n| Node {
            id: n.id,
            lat: n.lat,
            lon: n.lon,
        })
        .collect();
    let links = links
        .into_iter()
        .map(|l| -> Result<Link> {
            let channel: CapacityChannel = l.capacity_channel.parse()?;
            Ok(Link::new(l.id, l.tail, l.head, l.mode, l.cost, channel))
        })
        .collect::<Result<Vec<_>>>()?;
    build_network(nodes, vec![], links)
}

#[derive(Debug, Serialize, Deserialize)]
struct RouteRow {
    origin: String,
    destination: String,
    /// Network nodes the route joins, when they differ from the OD labels.
    #[serde(default)]
    origin_node: Option<String>,
    #[serde(default)]
    destination_node: Option<String>,
    route_index: usize,
    start: String,
    end: String,
    /// Link ids joined by ';'.
    links: String,
}

pub fn write_choice_sets(path: &Path, choice_sets: &[ChoiceSet], network: &Network) -> Result<()> {
    let rows: Vec<RouteRow> = choice_sets
        .iter()
        .flat_map(|cs| {
            cs.routes.iter().enumerate().map(move |(i, r)| RouteRow {
                origin: cs.od.origin.clone(),
                destination: cs.od.destination.clone(),
                origin_node: r.links.first().map(|&l| network.link(l).tail.clone()),
                destination_node: r.links.last().map(|&l| network.link(l).head.clone()),
                route_index: i,
                start: r.key.start.clone(),
                end: r.key.end.clone(),
                links: r.links.iter().map(|&l| network.link_id(l)).collect::<Vec<_>>().join(";"),
            })
        })
        .collect();
    write_rows(path, &rows)
}

/// Reads `routes.csv`; routes keep their file order within each OD.
///
/// Routes are checked against the node columns, then labelled with the OD.
pub fn read_choice_sets(path: &Path, network: &Network) -> Result<Vec<ChoiceSet>> {
    let rows: Vec<RouteRow> = read_rows(path)?;
    let mut grouped: BTreeMap<Od, Vec<(usize, Route)>> = BTreeMap::new();
    for r in rows {
        let od = Od::new(&r.origin, &r.destination);
        let ids: Vec<&str> = r.links.split(';').map(str::trim).filter(|s| !s.is_empty()).collect();
        let nodes = Od::new(
            r.origin_node.unwrap_or_else(|| r.origin.clone()),
            r.destination_node.unwrap_or_else(|| r.destination.clone()),
        );
        let mut route = Route::new(network, nodes, RouteKey::new(r.start, r.end), &ids)?;
        route.od = od.clone();
        grouped.entry(od).or_default().push((r.route_index, route));
    }
    grouped
        .into_iter()
        .map(|(od, mut routes)| {
            routes.sort_by_key(|(i, _)| *i);
            for (expected, (i, _)) in routes.iter().enumerate() {
                if *i != expected {
                    return Err(Error::Parse {
                        path: display(path),
                        message: format!("OD {od}: route indices must run 0..n, found {i} at position {expected}"),
                    });
                }
            }
            ChoiceSet::new(od, routes.into_iter().map(|(_, r)| r).collect())
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct IntervalRow {
    t: i64,
    link_id: String,
    flow: f64,
    capacity_observed: Option<f64>,
}

pub fn write_intervals(path: &Path, records: &[IntervalRecord], network: &Network) -> Result<()> {
    let mut rows = Vec::new();
    for rec in records {
        for l in network.link_indices() {
            rows.push(IntervalRow {
                t: rec.t,
                link_id: network.link_id(l).to_string(),
                flow: rec.flows.get(l),
                capacity_observed: rec.capacities.get(l),
            });
        }
    }
    write_rows(path, &rows)
}

/// Reads `intervals.csv`. Links absent from an interval carry zero flow.
pub fn read_intervals(path: &Path, network: &Network, provenance: CapacityProvenance) -> Result<Vec<IntervalRecord>> {
    let rows: Vec<IntervalRow> = read_rows(path)?;
    let mut by_t: BTreeMap<i64, IntervalRecord> = BTreeMap::new();
    for r in rows {
        let idx = network.require_link(&r.link_id)?;
        let rec = by_t.entry(r.t).or_insert_with(|| IntervalRecord {
            t: r.t,
            flows: FlowSnapshot::zeros(r.t, network),
            capacities: CapacityVector::new(r.t, provenance),
        });
        if !(r.flow >= 0.0) {
            return Err(Error::Parse {
                path: display(path),
                message: format!("negative flow {} on link {} at t = {}", r.flow, r.link_id, r.t),
            });
        }
        rec.flows.flows[idx.0] = r.flow;
        if let Some(cap) = r.capacity_observed {
            if network.link(idx).capacity_channel.is_capacitated() {
                rec.capacities.capacities.insert(idx, cap);
            }
        }
    }
    Ok(by_t.into_values().collect())
}

/// Observation-frame rows for observations on an arbitrary network. Each
/// observation expands into `weight` blocks; the frequency columns count
/// the interval's chosen trips by route start and end.
pub fn frame_from_observations(observations: &[ChoiceObservation], network: &Network) -> Vec<FrameRow> {
    let mut by_t: BTreeMap<i64, Vec<&ChoiceObservation>> = BTreeMap::new();
    for o in observations {
        by_t.entry(o.interval).or_default().push(o);
    }
    let mut rows = Vec::new();
    for (t, obs) in by_t {
        let mut departures: BTreeMap<&str, u32> = BTreeMap::new();
        let mut arrivals: BTreeMap<&str, u32> = BTreeMap::new();
        let mut out_demand: BTreeMap<&str, u32> = BTreeMap::new();
        let mut in_demand: BTreeMap<&str, u32> = BTreeMap::new();
        for o in &obs {
            let n = o.weight.round() as u32;
            let key = &o.choice_set.routes[o.chosen].key;
            *departures.entry(&key.start).or_default() += n;
            *arrivals.entry(&key.end).or_default() += n;
            *out_demand.entry(&o.choice_set.od.origin).or_default() += n;
            *in_demand.entry(&o.choice_set.od.destination).or_default() += n;
        }
        let mut sorted = obs.clone();
        sorted.sort_by(|a, b| {
            (&a.choice_set.od, &a.choice_set.routes[a.chosen].key)
                .cmp(&(&b.choice_set.od, &b.choice_set.routes[b.chosen].key))
        });
        for o in sorted {
            let cs = &o.choice_set;
            let mut order: Vec<usize> = (0..cs.len()).collect();
            order.sort_by(|&a, &b| cs.routes[a].key.cmp(&cs.routes[b].key));
            for _ in 0..(o.weight.round() as usize).max(1) {
                for &i in &order {
                    let r = &cs.routes[i];
                    rows.push(FrameRow {
                        t,
                        start_ct: cs.od.origin.clone(),
                        end_ct: cs.od.destination.clone(),
                        start_station: r.key.start.clone(),
                        end_station: r.key.end.clone(),
                        choice: u8::from(i == o.chosen),
                        cost: r.cost(network),
                        infreq: arrivals.get(r.key.end.as_str()).copied().unwrap_or(0),
                        outfreq: departures.get(r.key.start.as_str()).copied().unwrap_or(0),
                        out_demand: out_demand.get(cs.od.origin.as_str()).copied().unwrap_or(0),
                        in_demand: in_demand.get(cs.od.destination.as_str()).copied().unwrap_or(0),
                    });
                }
            }
        }
    }
    rows
}

const FRAME_HEADER: [&str; 11] = [
    "t",
    "Start CT",
    "End CT",
    "start.station id",
    "end.station id",
    "choice",
    "cost",
    "infreq",
    "outfreq",
    "out demand",
    "in demand",
];

pub fn write_frame(path: &Path, rows: &[FrameRow]) -> Result<()> {
    write_with_header(path, &FRAME_HEADER, rows)
}

pub fn read_frame(path: &Path) -> Result<Vec<FrameRow>> {
    read_rows(path)
}

/// Reads an observation frame and rebuilds weighted observations.
pub fn read_observations(path: &Path, choice_sets: &[ChoiceSet]) -> Result<Vec<ChoiceObservation>> {
    let rows = read_frame(path)?;
    let map: BTreeMap<Od, ChoiceSet> = choice_sets.iter().map(|cs| (cs.od.clone(), cs.clone())).collect();
    crate::ingest::observations_from_rows(&rows, &map)
}

/// Offline estimates as stored in `model.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub theta: Dispersion,
    pub efficiency: EfficiencyModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_report: Option<EstimationReport>,
}

pub fn write_model(path: &Path, model: &ModelFile) -> Result<()> {
    let text = serde_json::to_string_pretty(model)?;
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: display(path),
        source,
    })
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: display(path),
        source,
    })?;
    serde_json::from_reader(file).map_err(|e| Error::Parse {
        path: display(path),
        message: e.to_string(),
    })
}

#[derive(Debug, Serialize)]
struct OnlineRow<'a> {
    t: i64,
    link_id: &'a str,
    u_hat: f64,
    binding: u8,
    w_hat: f64,
}

#[derive(Debug, Serialize)]
struct ShareRow<'a> {
    t: i64,
    origin: &'a str,
    destination: &'a str,
    route_index: usize,
    probability: f64,
}

/// Writes `online_results.csv` (capacitated links only) and `shares.csv`.
pub fn write_online_results(dir: &Path, results: &[IntervalResult], network: &Network) -> Result<()> {
    let mut links = Vec::new();
    let mut shares = Vec::new();
    for r in results {
        for l in network.capacitated_links() {
            links.push(OnlineRow {
                t: r.t,
                link_id: network.link_id(l),
                u_hat: r.u_hat.get(l).unwrap_or(f64::NAN),
                binding: u8::from(r.binding.contains(&l)),
                w_hat: r.w_hat.get(l),
            });
        }
        for (od, p) in &r.predicted_shares {
            for (i, &v) in p.iter().enumerate() {
                shares.push(ShareRow {
                    t: r.t,
                    origin: &od.origin,
                    destination: &od.destination,
                    route_index: i,
                    probability: v,
                });
            }
        }
    }
    write_with_header(&dir.join("online_results.csv"), &["t", "link_id", "u_hat", "binding", "w_hat"], &links)?;
    write_with_header(
        &dir.join("shares.csv"),
        &["t", "origin", "destination", "route_index", "probability"],
        &shares,
    )
}

#[derive(Debug, Serialize)]
struct ComparisonRow<'a> {
    variant: &'a str,
    interval: i64,
    match_score: f64,
    loglik: f64,
}

pub fn write_model_comparison(path: &Path, reports: &[VariantReport]) -> Result<()> {
    let rows: Vec<ComparisonRow> = reports
        .iter()
        .flat_map(|r| {
            r.intervals.iter().map(move |i| ComparisonRow {
                variant: &r.variant.id,
                interval: i.t,
                match_score: i.match_score,
                loglik: i.loglik,
            })
        })
        .collect();
    write_with_header(path, &["variant", "interval", "match_score", "loglik"], &rows)
}

#[derive(Debug, Serialize)]
struct SurplusCsvRow {
    t: i64,
    od: String,
    route: String,
    base_cost: f64,
    effective_cost: f64,
    delta_cs: f64,
}

pub fn write_surplus(path: &Path, rows: &[SurplusRow]) -> Result<()> {
    let rows: Vec<SurplusCsvRow> = rows
        .iter()
        .map(|r| SurplusCsvRow {
            t: r.t,
            od: format!("{}>{}", r.od.origin, r.od.destination),
            route: format!("{}>{}", r.route.start, r.route.end),
            base_cost: r.base_cost,
            effective_cost: r.effective_cost,
            delta_cs: r.delta_cs,
        })
        .collect();
    write_with_header(path, &["t", "od", "route", "base_cost", "effective_cost", "delta_cs"], &rows)
}

#[derive(Debug, Serialize)]
struct TruthRow<'a> {
    t: i64,
    origin: &'a str,
    destination: &'a str,
    demand: u32,
    served: u32,
    dropped: u32,
    /// Travelers per route index, joined by ';'.
    route_flows: String,
}

/// Writes the simulator's ground-truth trace.
pub fn write_ground_truth(path: &Path, truth: &[IntervalTruth]) -> Result<()> {
    let rows: Vec<TruthRow> = truth
        .iter()
        .flat_map(|tr| {
            tr.demand.iter().map(move |(od, &demand)| TruthRow {
                t: tr.t,
                origin: &od.origin,
                destination: &od.destination,
                demand,
                served: tr.served.get(od).copied().unwrap_or(0),
                dropped: tr.dropped.get(od).copied().unwrap_or(0),
                route_flows: tr
                    .route_flows
                    .get(od)
                    .map(|v| v.iter().map(u32::to_string).collect::<Vec<_>>().join(";"))
                    .unwrap_or_default(),
            })
        })
        .collect();
    write_with_header(
        path,
        &["t", "origin", "destination", "demand", "served", "dropped", "route_flows"],
        &rows,
    )
}

pub fn read_stations(path: &Path) -> Result<BTreeMap<String, Station>> {
    let rows: Vec<Station> = read_rows(path)?;
    let mut out = BTreeMap::new();
    for s in rows {
        if out.contains_key(&s.id) {
            return Err(Error::Parse {
                path: display(path),
                message: format!("duplicate station {}", s.id),
            });
        }
        out.insert(s.id.clone(), s);
    }
    Ok(out)
}

pub fn read_zones(path: &Path) -> Result<BTreeMap<String, Zone>> {
    let rows: Vec<Zone> = read_rows(path)?;
    Ok(rows.into_iter().map(|z| (z.id.clone(), z)).collect())
}
