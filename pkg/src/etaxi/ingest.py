"""Trip-record parsing, junction snapping, route-discrepancy filter, shifts."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from typing import IO, Iterable, Mapping

from .network import NoPathError, RoadGraph

MORNING = "Morning"
EVENING = "Evening"
SHIFT_START_HOUR = {MORNING: 5, EVENING: 17}

DEFAULT_SCHEMA = {
    "taxi_id": "taxi_id",
    "pickup_time": "pickup_datetime",
    "dropoff_time": "dropoff_datetime",
    "trip_distance": "trip_distance_km",
    "pickup_lat": "pickup_lat",
    "pickup_lon": "pickup_lon",
    "dropoff_lat": "dropoff_lat",
    "dropoff_lon": "dropoff_lon",
    "recorded_fare": "fare_usd",
}
OPTIONAL_FIELDS = {"recorded_fare"}

# rough NYC box: lat_min, lat_max, lon_min, lon_max
NYC_BBOX = (40.45, 41.0, -74.3, -73.65)
MAX_SNAP_KM = 0.5
DISCREPANCY_KM = 0.3


class SchemaError(ValueError):
    """A required column is missing from the trip CSV header."""


@dataclass(frozen=True)
class TripRecord:
    taxi_id: str
    pickup_time: datetime
    dropoff_time: datetime
    trip_distance: float
    pickup_loc: tuple[float, float]
    dropoff_loc: tuple[float, float]
    recorded_fare: float | None = None


@dataclass(frozen=True)
class SnappedTrip:
    taxi_id: str
    origin: int
    dest: int
    pickup_time: datetime
    dropoff_time: datetime
    duration_min: int
    distance_km: float
    recorded_fare: float | None = None

    @property
    def shift(self) -> str:
        return assign_shift(self.pickup_time)

    @property
    def start_slot(self) -> int:
        """Minutes since the start of the trip's shift."""
        start = SHIFT_START_HOUR[self.shift] * 60
        return (self.pickup_time.hour * 60 + self.pickup_time.minute - start) % 1440


@dataclass
class RejectReport:
    total: int = 0
    kept: int = 0
    rejected: Counter = field(default_factory=Counter)

    def reject(self, reason: str, n: int = 1) -> None:
        self.rejected[reason] += n

    def to_json(self) -> dict:
        return {"total": self.total, "kept": self.kept,
                "rejected": {k: self.rejected[k] for k in sorted(self.rejected)}}


def assign_shift(when: datetime) -> str:
    """Morning is [05:00, 17:00) wall clock; everything else is Evening."""
    return MORNING if 5 <= when.hour < 17 else EVENING


def _parse_time(text: str) -> datetime:
    t = datetime.fromisoformat(text.strip())
    return t.replace(second=0, microsecond=0, tzinfo=None)


def parse_trips(source: IO[str] | IO[bytes] | str, schema: Mapping[str, str] | None = None,
                bbox: tuple[float, float, float, float] = NYC_BBOX,
                report: RejectReport | None = None) -> tuple[list[TripRecord], RejectReport]:
    """Parse a trip CSV.  Bad rows are counted in the report and skipped."""
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    report = report if report is not None else RejectReport()
    if isinstance(source, str):
        source = io.StringIO(source)
    elif isinstance(source, (io.BufferedIOBase, io.RawIOBase)) or "b" in getattr(source, "mode", ""):
        source = io.TextIOWrapper(source, encoding="utf-8", newline="")
    reader = csv.DictReader(source)
    header = set(reader.fieldnames or [])
    missing = [schema[k] for k in DEFAULT_SCHEMA
               if k not in OPTIONAL_FIELDS and schema.get(k) not in header]
    if missing:
        raise SchemaError(f"trip CSV is missing required column(s): {', '.join(missing)}")
    fare_col = schema.get("recorded_fare")
    has_fare = fare_col in header
    lat0, lat1, lon0, lon1 = bbox

    records = []
    for row in reader:
        report.total += 1
        try:
            pick = _parse_time(row[schema["pickup_time"]])
            drop = _parse_time(row[schema["dropoff_time"]])
            dist = float(row[schema["trip_distance"]])
            plat, plon = float(row[schema["pickup_lat"]]), float(row[schema["pickup_lon"]])
            dlat, dlon = float(row[schema["dropoff_lat"]]), float(row[schema["dropoff_lon"]])
            fare = None
            if has_fare and (row.get(fare_col) or "").strip():
                fare = float(row[fare_col])
        except (TypeError, ValueError):
            report.reject("malformed")
            continue
        if not all(math.isfinite(v) for v in (dist, plat, plon, dlat, dlon)):
            report.reject("malformed")
        elif drop <= pick:
            report.reject("nonpositive_duration")
        elif dist < 0:
            report.reject("negative_distance")
        elif not (lat0 <= plat <= lat1 and lon0 <= plon <= lon1
                  and lat0 <= dlat <= lat1 and lon0 <= dlon <= lon1):
            report.reject("out_of_bbox")
        else:
            records.append(TripRecord(row[schema["taxi_id"]].strip(), pick, drop, dist,
                                      (plat, plon), (dlat, dlon), fare))
    return records, report


class SnapError(ValueError):
    """No junction lies within the snapping tolerance."""


def snap_to_junction(loc: tuple[float, float], graph: RoadGraph,
                     max_snap_km: float = MAX_SNAP_KM) -> int:
    jid, d = graph.nearest_junction(*loc)
    if d > max_snap_km:
        raise SnapError(f"nearest junction {jid} is {d * 1000:.0f} m away")
    return jid


def filter_by_route_discrepancy(trip: SnappedTrip, graph: RoadGraph,
                                limit_km: float = DISCREPANCY_KM) -> tuple[bool, str | None]:
    """(keep, reason).  Reason is ``no_path`` or ``route_discrepancy`` on discard."""
    try:
        shortest = graph.distance(trip.origin, trip.dest)
    except NoPathError:
        return False, "no_path"
    if abs(trip.distance_km - shortest) > limit_km + 1e-9:
        return False, "route_discrepancy"
    return True, None


def snap_trip(rec: TripRecord, graph: RoadGraph, max_snap_km: float = MAX_SNAP_KM) -> SnappedTrip:
    o = snap_to_junction(rec.pickup_loc, graph, max_snap_km)
    d = snap_to_junction(rec.dropoff_loc, graph, max_snap_km)
    minutes = max(1, int(round((rec.dropoff_time - rec.pickup_time).total_seconds() / 60.0)))
    return SnappedTrip(rec.taxi_id, o, d, rec.pickup_time, rec.dropoff_time, minutes,
                       rec.trip_distance, rec.recorded_fare)


def ingest(records: Iterable[TripRecord], graph: RoadGraph, report: RejectReport | None = None,
           max_snap_km: float = MAX_SNAP_KM,
           limit_km: float = DISCREPANCY_KM) -> tuple[list[SnappedTrip], RejectReport]:
    """Snap and filter parsed records; output ordered by (taxi, pick-up time)."""
    report = report if report is not None else RejectReport()
    kept = []
    for rec in records:
        try:
            trip = snap_trip(rec, graph, max_snap_km)
        except SnapError:
            report.reject("snap_failure")
            continue
        ok, reason = filter_by_route_discrepancy(trip, graph, limit_km)
        if not ok:
            report.reject(reason)
            continue
        kept.append(trip)
    kept.sort(key=lambda t: (t.taxi_id, t.pickup_time, t.dropoff_time, t.origin, t.dest))
    report.kept = len(kept)
    return kept, report


STORE_COLUMNS = ["taxi_id", "origin", "dest", "pickup_time", "dropoff_time",
                 "duration_min", "distance_km", "recorded_fare"]


def write_store(trips: Iterable[SnappedTrip], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(STORE_COLUMNS)
    for t in trips:
        w.writerow([t.taxi_id, t.origin, t.dest, t.pickup_time.isoformat(sep=" "),
                    t.dropoff_time.isoformat(sep=" "), t.duration_min, repr(t.distance_km),
                    "" if t.recorded_fare is None else repr(t.recorded_fare)])


def read_store(fh: IO[str]) -> list[SnappedTrip]:
    out = []
    for row in csv.DictReader(line for line in fh if not line.startswith("#")):
        out.append(SnappedTrip(
            row["taxi_id"], int(row["origin"]), int(row["dest"]),
            datetime.fromisoformat(row["pickup_time"]), datetime.fromisoformat(row["dropoff_time"]),
            int(row["duration_min"]), float(row["distance_km"]),
            float(row["recorded_fare"]) if row["recorded_fare"] else None))
    return out
