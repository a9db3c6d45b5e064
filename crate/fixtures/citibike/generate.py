"""Writes a synthetic Citi Bike day: 17 zones, 41 stations, 1000 trips.

Station pairs are drawn by logit on walk + ride minutes with theta = 0.3.
"""
import csv
import math
import random
from datetime import datetime, timedelta

rng = random.Random(20180718)
zones = []
for i in range(17):
    r, c = divmod(i, 4)
    zones.append((str(10100 + 100 * i), 40.700 + 0.011 * r, -74.000 + 0.015 * c))

stations = []
sid = 3000
for k, (zid, lat, lon) in enumerate(zones):
    for j in range(4 if k == 0 else 3 if k < 6 else 2):
        ang = rng.uniform(0, 2 * math.pi)
        dist_km = rng.uniform(0.05, 0.3)
        dlat = dist_km * math.cos(ang) / 111.2
        dlon = dist_km * math.sin(ang) / (111.2 * math.cos(math.radians(lat)))
        stations.append((str(sid), round(lat + dlat, 6), round(lon + dlon, 6), zid, rng.choice([11, 15, 19, 23, 27])))
        sid += 1

def km(a, b):
    p1, p2 = math.radians(a[1]), math.radians(b[1])
    dp, dl = p2 - p1, math.radians(b[2] - a[2])
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * 6371 * math.asin(math.sqrt(h))

pairs = set()
while len(pairs) < 100:
    o, d = rng.sample(range(17), 2)
    pairs.add((o, d))
pairs = sorted(pairs)
weights = [rng.uniform(0.5, 2.0) for _ in pairs]
by_zone = {z[0]: [s for s in stations if s[3] == z[0]] for z in zones}

start = datetime(2018, 7, 18, 7, 0, 0)
trips = []
for _ in range(1000):
    o, d = rng.choices(pairs, weights)[0]
    oz, dz = zones[o], zones[d]
    alts = [(a, b) for a in by_zone[oz[0]] for b in by_zone[dz[0]]]
    cost = [60 * (km(oz, a) / 5.0 + km(a, b) / 12.0 + km(b, dz) / 5.0) for a, b in alts]
    a, b = rng.choices(alts, [math.exp(-0.3 * (c - min(cost))) for c in cost])[0]
    t0 = start + timedelta(seconds=rng.uniform(0, 8 * 3600 - 1))
    secs = int(km(a, b) / 12.0 * 3600 * rng.uniform(0.8, 1.4)) + 60
    trips.append((t0, t0 + timedelta(seconds=secs), a, b, secs))
trips.sort(key=lambda r: r[0])

def ts(t):
    return t.strftime("%Y-%m-%d %H:%M:%S.") + "%04d" % (t.microsecond // 100)

with open("trips.csv", "w", newline="") as f:
    w = csv.writer(f, quoting=csv.QUOTE_NONNUMERIC)
    w.writerow(["tripduration", "starttime", "stoptime", "start station id", "start station name",
                "start station latitude", "start station longitude", "end station id", "end station name",
                "end station latitude", "end station longitude", "bikeid", "usertype", "birth year", "gender"])
    for i, (t0, t1, a, b, secs) in enumerate(trips):
        w.writerow([secs, ts(t0), ts(t1), a[0], "Station " + a[0], a[1], a[2], b[0], "Station " + b[0],
                    b[1], b[2], 30000 + i % 700, rng.choice(["Subscriber", "Customer"]), 1960 + i % 40, i % 3])

with open("stations.csv", "w", newline="") as f:
    w = csv.writer(f)
    w.writerow(["id", "lat", "lon", "zone", "rated_docks"])
    w.writerows(stations)

with open("zones.csv", "w", newline="") as f:
    w = csv.writer(f)
    w.writerow(["id", "lat", "lon"])
    w.writerows(zones)
