//! Ten hand-placed trips through the full ingest pipeline, checked against
//! counts and costs worked out by hand.

use std::collections::BTreeMap;

use chrono::{NaiveDate, NaiveDateTime};

use maas_choice::ingest::{ingest, FrameRow, IngestOptions, ParseReport, Station, TripRecord, Zone};
use maas_choice::io::{read_frame, write_frame};
use maas_choice::network::Od;

const A: &str = "13100";
const B: &str = "10100";

fn at(h: u32, m: u32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2018, 7, 18).unwrap().and_hms_opt(h, m, 0).unwrap()
}

fn zones() -> BTreeMap<String, Zone> {
    [(A, 40.7500, -73.9900), (B, 40.7600, -73.9750)]
        .into_iter()
        .map(|(id, lat, lon)| (id.to_string(), Zone { id: id.into(), lat, lon }))
        .collect()
}

fn stations() -> BTreeMap<String, Station> {
    [
        ("447", 40.7510, -73.9900, A),
        ("469", 40.7500, -73.9880, A),
        ("500", 40.7490, -73.9905, A),
        // zoned in A but about 1.1 km from any centroid
        ("520", 40.7400, -73.9900, A),
        ("379", 40.7605, -73.9750, B),
        ("3255", 40.7595, -73.9770, B),
        ("492", 40.7610, -73.9745, B),
        ("490", 40.7600, -73.9730, B),
    ]
    .into_iter()
    .map(|(id, lat, lon, zone)| {
        (
            id.to_string(),
            Station {
                id: id.into(),
                lat,
                lon,
                zone: zone.into(),
                rated_docks: 20,
            },
        )
    })
    .collect()
}

fn trip(from: &str, to: &str, start: (u32, u32), stop: (u32, u32)) -> TripRecord {
    let (a, b) = (at(start.0, start.1), at(stop.0, stop.1));
    TripRecord {
        start_time: a,
        stop_time: b,
        start_station: from.into(),
        end_station: to.into(),
        duration: (b - a).num_seconds() as f64,
    }
}

/// t = 0 is 07:00–07:30, t = 1 is 07:30–08:00.
fn trips() -> Vec<TripRecord> {
    vec![
        trip("469", "492", (7, 20), (7, 35)),
        trip("447", "492", (7, 31), (7, 42)),
        trip("447", "379", (7, 33), (7, 45)),
        trip("447", "492", (7, 40), (7, 52)),
        trip("500", "3255", (7, 41), (7, 55)),
        trip("520", "379", (7, 35), (7, 50)),
        trip("492", "447", (7, 36), (7, 48)),
        // arrives after the horizon closes
        trip("469", "490", (7, 50), (8, 5)),
        trip("469", "3255", (7, 44), (7, 58)),
        trip("500", "447", (7, 45), (7, 52)),
    ]
}

fn run() -> maas_choice::ingest::IngestOutput {
    let options = IngestOptions {
        horizon_start: Some(at(7, 0)),
        horizon_intervals: Some(2),
        ..Default::default()
    };
    ingest(trips(), ParseReport::default(), &stations(), &zones(), &options).unwrap()
}

/// Central angle from the unit-vector cross and dot products.
fn km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let v = |(lat, lon): (f64, f64)| {
        let (p, l) = (f64::to_radians(lat), f64::to_radians(lon));
        [p.cos() * l.cos(), p.cos() * l.sin(), p.sin()]
    };
    let (u, w) = (v(a), v(b));
    let cross = [
        u[1] * w[2] - u[2] * w[1],
        u[2] * w[0] - u[0] * w[2],
        u[0] * w[1] - u[1] * w[0],
    ];
    let norm = cross.iter().map(|c| c * c).sum::<f64>().sqrt();
    let dot: f64 = u.iter().zip(&w).map(|(x, y)| x * y).sum();
    6371.0 * norm.atan2(dot)
}

fn block_rows<'a>(frame: &'a [FrameRow], t: i64, o: &str, d: &str) -> Vec<&'a FrameRow> {
    frame.iter().filter(|r| r.t == t && r.start_ct == o && r.end_ct == d).collect()
}

fn row<'a>(rows: &[&'a FrameRow], p: &str, q: &str) -> &'a FrameRow {
    rows.iter().find(|r| r.start_station == p && r.end_station == q).unwrap()
}

#[test]
fn station_and_zone_counts_match_hand_tally() {
    let out = run();
    let agg = &out.aggregates;
    for (s, n) in [("447", 3), ("469", 2), ("500", 2), ("520", 1), ("492", 1), ("379", 0)] {
        assert_eq!(agg.departures_at(1, s), n, "departures from {s}");
    }
    for (s, n) in [("492", 3), ("379", 2), ("3255", 2), ("447", 2), ("490", 0)] {
        assert_eq!(agg.arrivals_at(1, s), n, "arrivals at {s}");
    }
    assert_eq!(agg.departures_at(0, "469"), 1);
    assert_eq!(agg.arrivals_at(0, "492"), 0);
    assert_eq!(agg.out_demand_at(1, A), 8);
    assert_eq!(agg.in_demand_at(1, B), 7);
    assert_eq!(agg.out_demand_at(1, B), 1);
    assert_eq!(agg.in_demand_at(1, A), 2);
    let departures: u32 = agg.departures.iter().filter(|((t, _), _)| *t == 1).map(|(_, n)| n).sum();
    assert_eq!(departures, 9);
}

#[test]
fn frame_blocks_and_indicators() {
    let out = run();
    let frame = &out.frame;
    assert_eq!(out.frame_report.excluded, 1);
    assert_eq!(out.frame_report.blocks, 9);
    // 12 + 6·12 for A→B, 12 for B→A, 6 for A→A
    assert_eq!(frame.len(), 102);

    let ab = block_rows(frame, 1, A, B);
    assert_eq!(ab.len(), 72);
    for block in ab.chunks(12) {
        assert_eq!(block.iter().filter(|r| r.choice == 1).count(), 1);
    }
    let chosen: Vec<(&str, &str)> = ab
        .iter()
        .filter(|r| r.choice == 1)
        .map(|r| (r.start_station.as_str(), r.end_station.as_str()))
        .collect();
    assert_eq!(
        chosen,
        [("447", "492"), ("447", "379"), ("447", "492"), ("500", "3255"), ("469", "3255"), ("469", "490")]
    );

    let r = row(&ab, "447", "492");
    assert_eq!((r.outfreq, r.infreq, r.out_demand, r.in_demand), (3, 3, 8, 7));
    let r = row(&ab, "469", "490");
    assert_eq!((r.outfreq, r.infreq), (2, 0));
    let r = row(&ab, "500", "379");
    assert_eq!((r.outfreq, r.infreq), (2, 2));
    assert!(ab.iter().all(|r| r.start_station != "520"));

    let a0 = block_rows(frame, 0, A, B);
    assert_eq!(a0.len(), 12);
    let r = row(&a0, "469", "492");
    assert_eq!((r.choice, r.outfreq, r.infreq, r.out_demand, r.in_demand), (1, 1, 0, 1, 1));

    let aa = block_rows(frame, 1, A, A);
    assert_eq!(aa.len(), 6);
    assert!(aa.iter().all(|r| r.start_station != r.end_station));
    assert_eq!(row(&aa, "500", "447").choice, 1);
    assert_eq!(block_rows(frame, 1, B, A).len(), 12);
}

#[test]
fn costs_are_walk_ride_walk_minutes() {
    let out = run();
    let (zs, ss) = (zones(), stations());
    let z = |id: &str| (zs[id].lat, zs[id].lon);
    let s = |id: &str| (ss[id].lat, ss[id].lon);
    for r in &out.frame {
        let walk = km(z(&r.start_ct), s(&r.start_station)) + km(s(&r.end_station), z(&r.end_ct));
        let ride = km(s(&r.start_station), s(&r.end_station));
        let expected = walk / 5.0 * 60.0 + ride / 12.0 * 60.0;
        assert!((r.cost - expected).abs() < 1e-9, "{} → {}: {} vs {expected}", r.start_station, r.end_station, r.cost);
    }
}

#[test]
fn observations_merge_identical_choices() {
    let out = run();
    assert_eq!(out.observations.len(), 8);
    assert_eq!(out.observations.iter().map(|o| o.weight).sum::<f64>(), 9.0);
    let od = Od::new(A, B);
    let twice = out
        .observations
        .iter()
        .find(|o| o.interval == 1 && o.choice_set.od == od && o.weight == 2.0)
        .unwrap();
    let key = &twice.choice_set.routes[twice.chosen].key;
    assert_eq!((key.start.as_str(), key.end.as_str()), ("447", "492"));
}

#[test]
fn frame_file_round_trip_is_exact() {
    let out = run();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.csv");
    let second = dir.path().join("b.csv");
    write_frame(&first, &out.frame).unwrap();
    let text = std::fs::read_to_string(&first).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "t,Start CT,End CT,start.station id,end.station id,choice,cost,infreq,outfreq,out demand,in demand"
    );
    let back = read_frame(&first).unwrap();
    assert_eq!(back, out.frame);
    write_frame(&second, &back).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}
