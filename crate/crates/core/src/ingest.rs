//! Bikeshare trip records to estimation inputs.
//!
//! Trips are filtered to the study stations and bucketed into fixed-length
//! intervals by start time. Each OD's choice set pairs the stations within
//! walking range of the origin and destination centroids, giving routes
//! `centroid → pickup → drop-off → centroid` on a network with one pickup
//! and one drop-off link per station. Station inventories are rebuilt from
//! the trip events and averaged per interval to give observed capacities.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use chrono::{Duration, NaiveDateTime};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::capacity::{CapacityProvenance, CapacityVector, FlowSnapshot, IntervalRecord};
use crate::choice::ChoiceObservation;
use crate::error::{Error, Result};
use crate::network::{build_network, CapacityChannel, ChoiceSet, Link, Mode, Network, Node, Od, Route, RouteKey};

pub const WALK_MODE: u32 = 0;
pub const BIKE_MODE: u32 = 1;

const EARTH_RADIUS_KM: f64 = 6371.0;

const TIME_FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Great-circle distance in kilometres.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().asin()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripRecord {
    pub start_time: NaiveDateTime,
    pub stop_time: NaiveDateTime,
    pub start_station: String,
    pub end_station: String,
    /// Seconds.
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub zone: String,
    pub rated_docks: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub rows: usize,
    pub kept: usize,
    pub malformed: usize,
    pub reversed: usize,
    pub external: usize,
}

#[derive(Debug, Deserialize)]
struct RawTrip {
    #[serde(default)]
    tripduration: Option<String>,
    starttime: String,
    stoptime: String,
    #[serde(rename = "start station id")]
    start_station: String,
    #[serde(rename = "end station id")]
    end_station: String,
}

/// Reads Citi Bike trip rows, keeping trips with both ends in `stations`.
pub fn parse_trips<R: Read>(
    reader: R,
    path: &str,
    stations: &BTreeMap<String, Station>,
) -> Result<(Vec<TripRecord>, ParseReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut report = ParseReport::default();
    let mut trips = Vec::new();
    for row in rdr.deserialize::<RawTrip>() {
        report.rows += 1;
        let raw = match row {
            Ok(r) => r,
            Err(e) => {
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    return Err(Error::Csv { path: path.into(), source: e });
                }
                report.malformed += 1;
                continue;
            }
        };
        let (Some(start), Some(stop)) = (parse_timestamp(&raw.starttime), parse_timestamp(&raw.stoptime)) else {
            report.malformed += 1;
            continue;
        };
        if stop < start {
            report.reversed += 1;
            continue;
        }
        let start_station = raw.start_station.trim().to_string();
        let end_station = raw.end_station.trim().to_string();
        if !stations.contains_key(&start_station) || !stations.contains_key(&end_station) {
            report.external += 1;
            continue;
        }
        let duration = raw
            .tripduration
            .as_deref()
            .and_then(|d| d.trim().parse::<f64>().ok())
            .unwrap_or_else(|| (stop - start).num_milliseconds() as f64 / 1000.0);
        trips.push(TripRecord {
            start_time: start,
            stop_time: stop,
            start_station,
            end_station,
            duration,
        });
        report.kept += 1;
    }
    if report.malformed + report.reversed > 0 {
        warn!(
            "{path}: skipped {} malformed and {} reversed rows",
            report.malformed, report.reversed
        );
    }
    if trips.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            message: format!("no valid in-network trips among {} rows", report.rows),
        });
    }
    info!("{path}: kept {} of {} trips", report.kept, report.rows);
    Ok((trips, report))
}

/// Fixed-length intervals starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Horizon {
    pub start: NaiveDateTime,
    pub interval_minutes: i64,
    pub intervals: usize,
}

impl Horizon {
    /// Midnight of the first trip's day through the end of the last trip's.
    pub fn covering(trips: &[TripRecord], interval_minutes: i64) -> Self {
        let first = trips.iter().map(|t| t.start_time).min().expect("non-empty trips");
        let last = trips.iter().map(|t| t.start_time).max().expect("non-empty trips");
        let start = first.date().and_hms_opt(0, 0, 0).expect("midnight");
        let end = last.date().and_hms_opt(0, 0, 0).expect("midnight") + Duration::days(1);
        let intervals = ((end - start).num_minutes() / interval_minutes) as usize;
        Self {
            start,
            interval_minutes,
            intervals,
        }
    }

    pub fn end(&self) -> NaiveDateTime {
        self.start + Duration::minutes(self.interval_minutes * self.intervals as i64)
    }

    /// Interval index of a timestamp, or `None` outside the horizon.
    pub fn index(&self, at: NaiveDateTime) -> Option<i64> {
        if at < self.start || at >= self.end() {
            return None;
        }
        Some((at - self.start).num_seconds() / (self.interval_minutes * 60))
    }

    fn bounds(&self, t: i64) -> (NaiveDateTime, NaiveDateTime) {
        let a = self.start + Duration::minutes(self.interval_minutes * t);
        (a, a + Duration::minutes(self.interval_minutes))
    }
}

/// Trip counts per interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntervalAggregates {
    pub intervals: usize,
    /// Departures per (t, station), by start time.
    pub departures: BTreeMap<(i64, String), u32>,
    /// Arrivals per (t, station), by stop time.
    pub arrivals: BTreeMap<(i64, String), u32>,
    /// Trips starting in t from each origin zone.
    pub out_demand: BTreeMap<(i64, String), u32>,
    /// Trips starting in t bound for each destination zone.
    pub in_demand: BTreeMap<(i64, String), u32>,
    /// Realized (pickup, drop-off) station pairs per (t, OD), in trip order.
    pub od_trips: BTreeMap<(i64, Od), Vec<(String, String)>>,
}

impl IntervalAggregates {
    pub fn departures_at(&self, t: i64, station: &str) -> u32 {
        self.departures.get(&(t, station.to_string())).copied().unwrap_or(0)
    }

    pub fn arrivals_at(&self, t: i64, station: &str) -> u32 {
        self.arrivals.get(&(t, station.to_string())).copied().unwrap_or(0)
    }

    pub fn out_demand_at(&self, t: i64, zone: &str) -> u32 {
        self.out_demand.get(&(t, zone.to_string())).copied().unwrap_or(0)
    }

    pub fn in_demand_at(&self, t: i64, zone: &str) -> u32 {
        self.in_demand.get(&(t, zone.to_string())).copied().unwrap_or(0)
    }

    /// ODs with at least one trip, over all intervals.
    pub fn ods(&self) -> BTreeSet<Od> {
        self.od_trips.keys().map(|(_, od)| od.clone()).collect()
    }
}

/// Buckets trips into the horizon's intervals.
pub fn aggregate_intervals(
    trips: &[TripRecord],
    stations: &BTreeMap<String, Station>,
    horizon: &Horizon,
) -> Result<IntervalAggregates> {
    let mut agg = IntervalAggregates {
        intervals: horizon.intervals,
        ..Default::default()
    };
    let mut ordered: Vec<&TripRecord> = trips.iter().collect();
    ordered.sort_by(|a, b| {
        (a.start_time, &a.start_station, &a.end_station, a.stop_time).cmp(&(
            b.start_time,
            &b.start_station,
            &b.end_station,
            b.stop_time,
        ))
    });
    for trip in ordered {
        let t = horizon.index(trip.start_time).ok_or_else(|| {
            Error::InvalidInput(format!(
                "trip starting {} lies outside the horizon {} .. {}",
                trip.start_time,
                horizon.start,
                horizon.end()
            ))
        })?;
        let zone = |id: &str| {
            stations
                .get(id)
                .map(|s| s.zone.clone())
                .ok_or_else(|| Error::InvalidInput(format!("unknown station {id}")))
        };
        let (oz, dz) = (zone(&trip.start_station)?, zone(&trip.end_station)?);
        *agg.departures.entry((t, trip.start_station.clone())).or_default() += 1;
        if let Some(ta) = horizon.index(trip.stop_time) {
            *agg.arrivals.entry((ta, trip.end_station.clone())).or_default() += 1;
        }
        *agg.out_demand.entry((t, oz.clone())).or_default() += 1;
        *agg.in_demand.entry((t, dz.clone())).or_default() += 1;
        agg.od_trips
            .entry((t, Od::new(oz, dz)))
            .or_default()
            .push((trip.start_station.clone(), trip.end_station.clone()));
    }
    Ok(agg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub walk_kmh: f64,
    pub bike_kmh: f64,
    /// Maximum walk from a centroid to a candidate station, metres.
    pub max_walk_m: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            walk_kmh: 5.0,
            bike_kmh: 12.0,
            max_walk_m: 800.0,
        }
    }
}

impl CostParams {
    pub fn walk_minutes(&self, km: f64) -> f64 {
        km / self.walk_kmh * 60.0
    }

    pub fn bike_minutes(&self, km: f64) -> f64 {
        km / self.bike_kmh * 60.0
    }
}

pub fn zone_node(zone: &str) -> String {
    format!("Z:{zone}")
}

pub fn station_node(station: &str) -> String {
    format!("S:{station}")
}

pub fn pickup_link(station: &str) -> String {
    format!("pick:{station}")
}

pub fn dropoff_link(station: &str) -> String {
    format!("drop:{station}")
}

pub fn ride_link(from: &str, to: &str) -> String {
    format!("ride:{from}>{to}")
}

pub fn access_link(zone: &str, station: &str) -> String {
    format!("access:{zone}>{station}")
}

pub fn egress_link(station: &str, zone: &str) -> String {
    format!("egress:{station}>{zone}")
}

/// Stations within walking range of a zone centroid, nearest first.
pub fn candidate_stations<'a>(zone: &Zone, stations: &'a BTreeMap<String, Station>, params: &CostParams) -> Vec<(&'a Station, f64)> {
    let mut out: Vec<(&Station, f64)> = stations
        .values()
        .map(|s| (s, haversine_km(zone.lat, zone.lon, s.lat, s.lon)))
        .filter(|(_, km)| km * 1000.0 <= params.max_walk_m)
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.id.cmp(&b.0.id)));
    out
}

/// The study network and one choice set per OD.
#[derive(Clone, Debug)]
pub struct StudyNetwork {
    pub network: Network,
    pub choice_sets: BTreeMap<Od, ChoiceSet>,
    pub stations: BTreeMap<String, Station>,
    pub zones: BTreeMap<String, Zone>,
}

impl StudyNetwork {
    pub fn choice_set_list(&self) -> Vec<ChoiceSet> {
        self.choice_sets.values().cloned().collect()
    }
}

/// Builds pickup × drop-off choice sets for the given ODs.
pub fn build_choice_sets(
    zones: &BTreeMap<String, Zone>,
    stations: &BTreeMap<String, Station>,
    ods: &BTreeSet<Od>,
    params: &CostParams,
) -> Result<StudyNetwork> {
    let mut nodes = Vec::new();
    for z in zones.values() {
        nodes.push(Node::at(zone_node(&z.id), z.lat, z.lon));
    }
    let mut links = Vec::new();
    for s in stations.values() {
        let sn = station_node(&s.id);
        nodes.push(Node::at(sn.clone(), s.lat, s.lon));
        nodes.push(Node::at(format!("{sn}:out"), s.lat, s.lon));
        nodes.push(Node::at(format!("{sn}:in"), s.lat, s.lon));
        links.push(Link::new(pickup_link(&s.id), sn.clone(), format!("{sn}:out"), BIKE_MODE, 0.0, CapacityChannel::Vehicle));
        links.push(Link::new(dropoff_link(&s.id), format!("{sn}:in"), sn, BIKE_MODE, 0.0, CapacityChannel::Space));
    }

    let mut access = BTreeMap::new();
    let mut egress = BTreeMap::new();
    let mut rides = BTreeSet::new();
    let mut pairs_by_od = BTreeMap::new();
    for od in ods {
        let zone = |id: &str| zones.get(id).ok_or_else(|| Error::UnknownNode(zone_node(id)));
        let (oz, dz) = (zone(&od.origin)?, zone(&od.destination)?);
        let picks = candidate_stations(oz, stations, params);
        let drops = candidate_stations(dz, stations, params);
        let mut pairs = Vec::new();
        for (p, walk_in) in &picks {
            for (q, walk_out) in &drops {
                if p.id == q.id {
                    continue;
                }
                access.insert((oz.id.clone(), p.id.clone()), *walk_in);
                egress.insert((q.id.clone(), dz.id.clone()), *walk_out);
                rides.insert((p.id.clone(), q.id.clone()));
                pairs.push((p.id.clone(), q.id.clone()));
            }
        }
        if pairs.is_empty() {
            return Err(Error::EmptyChoiceSet {
                origin: od.origin.clone(),
                destination: od.destination.clone(),
            });
        }
        pairs_by_od.insert(od.clone(), pairs);
    }
    for ((z, s), &km) in &access {
        links.push(Link::new(access_link(z, s), zone_node(z), station_node(s), WALK_MODE, params.walk_minutes(km), CapacityChannel::None));
    }
    for ((s, z), &km) in &egress {
        links.push(Link::new(egress_link(s, z), station_node(s), zone_node(z), WALK_MODE, params.walk_minutes(km), CapacityChannel::None));
    }
    for (p, q) in &rides {
        let (a, b) = (&stations[p], &stations[q]);
        let km = haversine_km(a.lat, a.lon, b.lat, b.lon);
        links.push(Link::new(
            ride_link(p, q),
            format!("{}:out", station_node(p)),
            format!("{}:in", station_node(q)),
            BIKE_MODE,
            params.bike_minutes(km),
            CapacityChannel::None,
        ));
    }
    let network = build_network(nodes, vec![Mode::new(WALK_MODE, "walk"), Mode::new(BIKE_MODE, "bike")], links)?;

    let mut choice_sets = BTreeMap::new();
    for (od, pairs) in pairs_by_od {
        let routes = pairs
            .iter()
            .map(|(p, q)| {
                Route::new(
                    &network,
                    Od::new(zone_node(&od.origin), zone_node(&od.destination)),
                    RouteKey::new(p.clone(), q.clone()),
                    &[
                        &access_link(&od.origin, p),
                        &pickup_link(p),
                        &ride_link(p, q),
                        &dropoff_link(q),
                        &egress_link(q, &od.destination),
                    ],
                )
                .map(|mut r| {
                    r.od = od.clone();
                    r
                })
            })
            .collect::<Result<Vec<_>>>()?;
        choice_sets.insert(od.clone(), ChoiceSet::new(od, routes)?);
    }
    Ok(StudyNetwork {
        network,
        choice_sets,
        stations: stations.clone(),
        zones: zones.clone(),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InventoryTrace {
    /// Time-average bikes per (t, station).
    pub average_bikes: BTreeMap<(i64, String), f64>,
    /// Bikes at the end of the horizon.
    pub final_bikes: BTreeMap<String, f64>,
    /// Events that would have left a station below zero or above its docks.
    pub clipped: BTreeMap<String, u32>,
}

/// Event-driven bike counts per station, averaged over each interval.
///
/// Stations missing from `initial` start half full.
pub fn reconstruct_inventory(
    trips: &[TripRecord],
    stations: &BTreeMap<String, Station>,
    initial: &BTreeMap<String, f64>,
    horizon: &Horizon,
) -> Result<InventoryTrace> {
    let mut events: BTreeMap<String, Vec<(NaiveDateTime, f64)>> = BTreeMap::new();
    for trip in trips {
        for (id, at, delta) in [(&trip.start_station, trip.start_time, -1.0), (&trip.end_station, trip.stop_time, 1.0)] {
            if !stations.contains_key(id) {
                return Err(Error::InvalidInput(format!("unknown station {id} in trips")));
            }
            if at >= horizon.start && at < horizon.end() {
                events.entry(id.clone()).or_default().push((at, delta));
            }
        }
    }
    let mut trace = InventoryTrace::default();
    let span = (horizon.interval_minutes * 60) as f64;
    for s in stations.values() {
        let docks = s.rated_docks as f64;
        let mut bikes = initial.get(&s.id).copied().unwrap_or(docks / 2.0).clamp(0.0, docks);
        let mut evs = events.remove(&s.id).unwrap_or_default();
        evs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut next = 0;
        let mut clips = 0;
        for t in 0..horizon.intervals as i64 {
            let (from, to) = horizon.bounds(t);
            let mut cursor = from;
            let mut integral = 0.0;
            while next < evs.len() && evs[next].0 < to {
                let (at, delta) = evs[next];
                integral += bikes * (at - cursor).num_milliseconds() as f64 / 1000.0;
                cursor = at;
                let raw = bikes + delta;
                if raw < 0.0 || raw > docks {
                    clips += 1;
                }
                bikes = raw.clamp(0.0, docks);
                next += 1;
            }
            integral += bikes * (to - cursor).num_milliseconds() as f64 / 1000.0;
            trace.average_bikes.insert((t, s.id.clone()), integral / span);
        }
        if clips > 0 {
            warn!("station {}: {clips} inventory events clipped to [0, {docks}]", s.id);
            trace.clipped.insert(s.id.clone(), clips);
        }
        trace.final_bikes.insert(s.id.clone(), bikes);
    }
    Ok(trace)
}

/// Per-interval link flows and time-average capacities on the study network.
pub fn interval_records(
    study: &StudyNetwork,
    trips: &[TripRecord],
    aggregates: &IntervalAggregates,
    inventory: &InventoryTrace,
    horizon: &Horizon,
) -> Vec<IntervalRecord> {
    let net = &study.network;
    let mut records: Vec<IntervalRecord> = (0..horizon.intervals as i64)
        .map(|t| IntervalRecord {
            t,
            flows: FlowSnapshot::zeros(t, net),
            capacities: CapacityVector::new(t, CapacityProvenance::ObservedTimeAverage),
        })
        .collect();
    let mut add = |t: i64, id: &str, v: f64| {
        if let (Some(r), Some(l)) = (records.get_mut(t as usize), net.link_index(id)) {
            r.flows.flows[l.0] += v;
        }
    };
    for ((t, s), n) in &aggregates.departures {
        add(*t, &pickup_link(s), *n as f64);
    }
    for ((t, s), n) in &aggregates.arrivals {
        add(*t, &dropoff_link(s), *n as f64);
    }
    for trip in trips {
        let Some(t) = horizon.index(trip.start_time) else { continue };
        let (a, b) = (&study.stations[&trip.start_station], &study.stations[&trip.end_station]);
        add(t, &ride_link(&a.id, &b.id), 1.0);
        add(t, &access_link(&a.zone, &a.id), 1.0);
        add(t, &egress_link(&b.id, &b.zone), 1.0);
    }
    for r in records.iter_mut() {
        for s in study.stations.values() {
            let bikes = inventory.average_bikes.get(&(r.t, s.id.clone())).copied().unwrap_or(0.0);
            if let Some(l) = net.link_index(&pickup_link(&s.id)) {
                r.capacities.capacities.insert(l, bikes);
            }
            if let Some(l) = net.link_index(&dropoff_link(&s.id)) {
                r.capacities.capacities.insert(l, s.rated_docks as f64 - bikes);
            }
        }
    }
    records
}

/// One row of the observation frame: one alternative of one trip's choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub t: i64,
    #[serde(rename = "Start CT")]
    pub start_ct: String,
    #[serde(rename = "End CT")]
    pub end_ct: String,
    #[serde(rename = "start.station id")]
    pub start_station: String,
    #[serde(rename = "end.station id")]
    pub end_station: String,
    pub choice: u8,
    pub cost: f64,
    pub infreq: u32,
    pub outfreq: u32,
    #[serde(rename = "out demand")]
    pub out_demand: u32,
    #[serde(rename = "in demand")]
    pub in_demand: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameReport {
    pub blocks: usize,
    /// Trips whose station pair is not an alternative of their OD.
    pub excluded: usize,
    pub empty_blocks: usize,
}

/// Emits one block of rows per realized trip; rows within a block are
/// sorted by (pickup, drop-off).
pub fn emit_observation_frame(
    study: &StudyNetwork,
    aggregates: &IntervalAggregates,
    include_empty: bool,
) -> (Vec<FrameRow>, FrameReport) {
    let mut rows = Vec::new();
    let mut report = FrameReport::default();
    for t in 0..aggregates.intervals as i64 {
        for (od, cs) in &study.choice_sets {
            let mut keys: Vec<&RouteKey> = cs.routes.iter().map(|r| &r.key).collect();
            keys.sort();
            let block = |chosen: Option<&RouteKey>| -> Vec<FrameRow> {
                keys.iter()
                    .map(|k| {
                        let route = &cs.routes[cs.position(k).expect("key from set")];
                        FrameRow {
                            t,
                            start_ct: od.origin.clone(),
                            end_ct: od.destination.clone(),
                            start_station: k.start.clone(),
                            end_station: k.end.clone(),
                            choice: u8::from(chosen == Some(*k)),
                            cost: route.cost(&study.network),
                            infreq: aggregates.arrivals_at(t, &k.end),
                            outfreq: aggregates.departures_at(t, &k.start),
                            out_demand: aggregates.out_demand_at(t, &od.origin),
                            in_demand: aggregates.in_demand_at(t, &od.destination),
                        }
                    })
                    .collect()
            };
            let trips = aggregates.od_trips.get(&(t, od.clone()));
            let mut emitted = false;
            for (p, q) in trips.into_iter().flatten() {
                let key = RouteKey::new(p.clone(), q.clone());
                if cs.position(&key).is_none() {
                    report.excluded += 1;
                    continue;
                }
                rows.extend(block(Some(&key)));
                report.blocks += 1;
                emitted = true;
            }
            if !emitted && include_empty {
                rows.extend(block(None));
                report.empty_blocks += 1;
            }
        }
    }
    if report.excluded > 0 {
        info!("{} trips use station pairs outside their OD's choice set", report.excluded);
    }
    (rows, report)
}

/// Choice observations from frame rows. Identical blocks merge into one
/// weighted observation; blocks without a chosen row are skipped.
pub fn observations_from_frame(rows: &[FrameRow], study: &StudyNetwork) -> Result<Vec<ChoiceObservation>> {
    observations_from_rows(rows, &study.choice_sets)
}

/// [`observations_from_frame`] against an arbitrary set of choice sets.
pub fn observations_from_rows(rows: &[FrameRow], choice_sets: &BTreeMap<Od, ChoiceSet>) -> Result<Vec<ChoiceObservation>> {
    let mut groups: BTreeMap<(i64, Od), Vec<&FrameRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.t, Od::new(&r.start_ct, &r.end_ct))).or_default().push(r);
    }
    let mut weights: BTreeMap<(i64, Od, usize), f64> = BTreeMap::new();
    for ((t, od), group) in groups {
        let cs = choice_sets
            .get(&od)
            .ok_or_else(|| Error::InvalidObservation(format!("no choice set for OD {od}")))?;
        let distinct: BTreeSet<(&str, &str)> = group
            .iter()
            .map(|r| (r.start_station.as_str(), r.end_station.as_str()))
            .collect();
        let k = distinct.len();
        if group.len() % k != 0 {
            return Err(Error::InvalidObservation(format!(
                "t = {t}, OD {od}: {} rows do not split into blocks of {k}",
                group.len()
            )));
        }
        for block in group.chunks(k) {
            let chosen: Vec<&&FrameRow> = block.iter().filter(|r| r.choice == 1).collect();
            match chosen.as_slice() {
                [] => continue,
                [r] => {
                    let key = RouteKey::new(r.start_station.clone(), r.end_station.clone());
                    let idx = cs.position(&key).ok_or_else(|| {
                        Error::InvalidObservation(format!("t = {t}, OD {od}: pair {}→{} not in choice set", key.start, key.end))
                    })?;
                    *weights.entry((t, od.clone(), idx)).or_default() += 1.0;
                }
                _ => {
                    return Err(Error::InvalidObservation(format!(
                        "t = {t}, OD {od}: block with {} chosen rows",
                        chosen.len()
                    )))
                }
            }
        }
    }
    weights
        .into_iter()
        .map(|((t, od, idx), w)| ChoiceObservation::new(t, choice_sets[&od].clone(), idx, w))
        .collect()
}

/// Everything the estimation stages need from a trip file.
#[derive(Clone, Debug)]
pub struct IngestOutput {
    pub study: StudyNetwork,
    pub trips: Vec<TripRecord>,
    pub parse_report: ParseReport,
    pub horizon: Horizon,
    pub aggregates: IntervalAggregates,
    pub inventory: InventoryTrace,
    pub records: Vec<IntervalRecord>,
    pub frame: Vec<FrameRow>,
    pub frame_report: FrameReport,
    pub observations: Vec<ChoiceObservation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    pub interval_minutes: i64,
    pub horizon_start: Option<NaiveDateTime>,
    pub horizon_intervals: Option<usize>,
    pub costs: CostParams,
    pub include_empty_ods: bool,
    pub initial_inventory: BTreeMap<String, f64>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            interval_minutes: 30,
            horizon_start: None,
            horizon_intervals: None,
            costs: CostParams::default(),
            include_empty_ods: false,
            initial_inventory: BTreeMap::new(),
        }
    }
}

/// Runs the whole pipeline on parsed trips.
pub fn ingest(
    trips: Vec<TripRecord>,
    parse_report: ParseReport,
    stations: &BTreeMap<String, Station>,
    zones: &BTreeMap<String, Zone>,
    options: &IngestOptions,
) -> Result<IngestOutput> {
    for s in stations.values() {
        if !zones.contains_key(&s.zone) {
            return Err(Error::InvalidInput(format!("station {} lies in unknown zone {}", s.id, s.zone)));
        }
    }
    let mut horizon = Horizon::covering(&trips, options.interval_minutes);
    if let Some(start) = options.horizon_start {
        horizon.start = start;
    }
    if let Some(n) = options.horizon_intervals {
        horizon.intervals = n;
    }
    let aggregates = aggregate_intervals(&trips, stations, &horizon)?;
    let ods = aggregates.ods();
    let mut reachable = BTreeSet::new();
    for od in &ods {
        let ok = |z: &str| !candidate_stations(&zones[z], stations, &options.costs).is_empty();
        if ok(&od.origin) && ok(&od.destination) {
            reachable.insert(od.clone());
        } else {
            warn!("OD {od} has no station within walking range; its trips are excluded");
        }
    }
    let study = build_choice_sets(zones, stations, &reachable, &options.costs)?;
    let inventory = reconstruct_inventory(&trips, stations, &options.initial_inventory, &horizon)?;
    let records = interval_records(&study, &trips, &aggregates, &inventory, &horizon);
    let (frame, frame_report) = emit_observation_frame(&study, &aggregates, options.include_empty_ods);
    let observations = observations_from_frame(&frame, &study)?;
    Ok(IngestOutput {
        study,
        trips,
        parse_report,
        horizon,
        aggregates,
        inventory,
        records,
        frame,
        frame_report,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn at(h: u32, m: u32, s: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2018, 7, 18).unwrap().and_hms_opt(h, m, s).unwrap()
    }

    fn stations() -> BTreeMap<String, Station> {
        [("1", 40.75, -73.99, "A"), ("2", 40.751, -73.991, "A"), ("3", 40.76, -73.98, "B")]
            .into_iter()
            .map(|(id, lat, lon, z)| {
                (
                    id.to_string(),
                    Station {
                        id: id.into(),
                        lat,
                        lon,
                        zone: z.into(),
                        rated_docks: 10,
                    },
                )
            })
            .collect()
    }

    fn horizon(n: usize) -> Horizon {
        Horizon {
            start: at(0, 0, 0),
            interval_minutes: 30,
            intervals: n,
        }
    }

    fn trip(a: &str, b: &str, start: NaiveDateTime, stop: NaiveDateTime) -> TripRecord {
        TripRecord {
            start_time: start,
            stop_time: stop,
            start_station: a.into(),
            end_station: b.into(),
            duration: (stop - start).num_seconds() as f64,
        }
    }

    #[test]
    fn parse_filters_and_counts() {
        let csv = "tripduration,starttime,stoptime,start station id,end station id,usertype\n\
                   600,2018-07-18 08:00:00.0000,2018-07-18 08:10:00.0000,1,3,Subscriber\n\
                   600,2018-07-18 08:10:00.0000,2018-07-18 08:00:00.0000,1,3,Subscriber\n\
                   600,2018-07-18 08:00:00.0000,2018-07-18 08:10:00.0000,1,999,Subscriber\n\
                   x,garbage,2018-07-18 08:10:00,1,3,Subscriber\n\
                   ,07/18/2018 09:00:00,07/18/2018 09:05:30,2,1,Customer\n";
        let (trips, rep) = parse_trips(csv.as_bytes(), "mem", &stations()).unwrap();
        assert_eq!(trips.len(), 2);
        assert_eq!(
            rep,
            ParseReport {
                rows: 5,
                kept: 2,
                malformed: 1,
                reversed: 1,
                external: 1
            }
        );
        assert_eq!(trips[1].duration, 330.0);
    }

    #[test]
    fn parse_with_no_valid_rows_fails() {
        let csv = "starttime,stoptime,start station id,end station id\n";
        assert!(parse_trips(csv.as_bytes(), "mem", &stations()).is_err());
    }

    #[test]
    fn haversine_known_distance() {
        // One degree of latitude on a 6371 km sphere.
        let d = haversine_km(40.0, -73.0, 41.0, -73.0);
        assert!((d - 6371.0 * std::f64::consts::PI / 180.0).abs() < 1e-9);
    }

    #[test]
    fn aggregates_count_by_interval() {
        let trips = vec![
            trip("1", "3", at(0, 5, 0), at(0, 20, 0)),
            trip("1", "3", at(0, 25, 0), at(0, 40, 0)),
            trip("2", "1", at(0, 40, 0), at(0, 50, 0)),
        ];
        let agg = aggregate_intervals(&trips, &stations(), &horizon(4)).unwrap();
        assert_eq!(agg.departures_at(0, "1"), 2);
        assert_eq!(agg.arrivals_at(0, "3"), 1);
        assert_eq!(agg.arrivals_at(1, "3"), 1);
        assert_eq!(agg.out_demand_at(0, "A"), 2);
        assert_eq!(agg.in_demand_at(0, "B"), 2);
        assert_eq!(agg.in_demand_at(1, "A"), 1);
        assert_eq!(agg.departures_at(3, "1"), 0);
        let total: u32 = agg.departures.values().sum();
        assert_eq!(total as usize, trips.len());
    }

    #[test]
    fn trip_outside_horizon_is_an_error() {
        let trips = vec![trip("1", "3", at(5, 0, 0), at(5, 10, 0))];
        assert!(aggregate_intervals(&trips, &stations(), &horizon(2)).is_err());
    }

    #[test]
    fn inventory_time_average() {
        let st = stations();
        let init = BTreeMap::from([("1".to_string(), 10.0)]);
        let none = reconstruct_inventory(&[], &st, &init, &horizon(2)).unwrap();
        assert_eq!(none.average_bikes[&(0, "1".to_string())], 10.0);
        assert_eq!(none.average_bikes[&(1, "2".to_string())], 5.0);

        // Departure at the midpoint of interval 0; the bike docks after the horizon.
        let trips = vec![trip("1", "3", at(0, 15, 0), at(1, 30, 0))];
        let tr = reconstruct_inventory(&trips, &st, &init, &horizon(2)).unwrap();
        assert!((tr.average_bikes[&(0, "1".to_string())] - 9.5).abs() < 1e-12);
        assert_eq!(tr.average_bikes[&(1, "1".to_string())], 9.0);
        assert!(tr.clipped.is_empty());
    }

    #[test]
    fn inventory_clips_at_docks() {
        let st = stations();
        let init = BTreeMap::from([("3".to_string(), 9.0)]);
        let trips = vec![
            trip("1", "3", at(0, 1, 0), at(0, 2, 0)),
            trip("2", "3", at(0, 1, 0), at(0, 3, 0)),
        ];
        let tr = reconstruct_inventory(&trips, &st, &init, &horizon(1)).unwrap();
        assert_eq!(tr.final_bikes["3"], 10.0);
        assert_eq!(tr.clipped["3"], 1);
        let avg = tr.average_bikes[&(0, "3".to_string())];
        assert!((0.0..=10.0).contains(&avg));
    }

    #[test]
    fn inventory_conserves_without_clipping() {
        let st = stations();
        let trips = vec![
            trip("1", "3", at(0, 1, 0), at(0, 12, 0)),
            trip("3", "2", at(0, 20, 0), at(0, 31, 0)),
            trip("2", "1", at(0, 45, 0), at(0, 50, 0)),
        ];
        let tr = reconstruct_inventory(&trips, &st, &BTreeMap::new(), &horizon(2)).unwrap();
        for (id, end) in &tr.final_bikes {
            let dep = trips.iter().filter(|t| &t.start_station == id).count() as f64;
            let arr = trips.iter().filter(|t| &t.end_station == id).count() as f64;
            assert_eq!(*end, 5.0 + arr - dep);
        }
    }

    #[test]
    fn no_station_in_range_names_the_od() {
        let zones: BTreeMap<String, Zone> = [("A", 40.75, -73.99), ("F", 41.5, -73.0)]
            .into_iter()
            .map(|(id, lat, lon)| (id.to_string(), Zone { id: id.into(), lat, lon }))
            .collect();
        let ods = BTreeSet::from([Od::new("A", "F")]);
        let err = build_choice_sets(&zones, &stations(), &ods, &CostParams::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyChoiceSet { ref destination, .. } if destination == "F"));
    }
}
