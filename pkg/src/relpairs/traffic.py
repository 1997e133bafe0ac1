"""Flights, plans, clearances and the surrogate trajectory predictor."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geo
from .geo import GeoPoint
from .timeutil import format_time, parse_time

STEP_S = 10.0
SIGMA_ROCD_FRACTION = 0.25

_CALLSIGN = re.compile(r"^[A-Z0-9]+$")


class TrafficError(ValueError):
    pass


def validate_callsign(callsign: str) -> str:
    if not isinstance(callsign, str) or not _CALLSIGN.match(callsign):
        raise TrafficError(f"invalid callsign: {callsign!r}")
    return callsign


@dataclass(frozen=True)
class Waypoint:
    name: str
    position: GeoPoint


@dataclass(frozen=True)
class FlightPlan:
    callsign: str
    origin: str
    destination: str
    waypoints: tuple[Waypoint, ...]

    def __post_init__(self):
        validate_callsign(self.callsign)
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        if len(self.waypoints) < 2:
            raise TrafficError(f"{self.callsign}: plan needs at least 2 waypoints")
        for a, b in zip(self.waypoints, self.waypoints[1:]):
            if a.name == b.name or a.position == b.position:
                raise TrafficError(f"{self.callsign}: consecutive duplicate waypoint {b.name}")

    @property
    def names(self) -> list[str]:
        return [w.name for w in self.waypoints]

    def index_of(self, name: str) -> int:
        for i, w in enumerate(self.waypoints):
            if w.name == name:
                return i
        raise TrafficError(f"{self.callsign}: waypoint {name} not in plan")

    def to_json(self) -> dict:
        return {
            "callsign": self.callsign,
            "adep": self.origin,
            "ades": self.destination,
            "waypoints": [{"name": w.name, "lat": w.position.lat, "lon": w.position.lon} for w in self.waypoints],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FlightPlan":
        wps = tuple(Waypoint(w["name"], GeoPoint(float(w["lat"]), float(w["lon"]))) for w in obj["waypoints"])
        return cls(obj["callsign"], obj.get("adep", ""), obj.get("ades", ""), wps)


@dataclass(frozen=True)
class AircraftState:
    callsign: str
    time: float
    position: GeoPoint
    current_fl: float
    cleared_fl: float
    ground_speed: float
    track: float
    rocd: float = 0.0
    exit_fl: Optional[float] = None

    def __post_init__(self):
        validate_callsign(self.callsign)
        if not 0.0 <= self.ground_speed <= 700.0:
            raise TrafficError(f"{self.callsign}: ground speed {self.ground_speed} outside [0, 700] kt")
        for name in ("current_fl", "cleared_fl"):
            v = getattr(self, name)
            if not 0.0 <= v <= 600.0:
                raise TrafficError(f"{self.callsign}: {name} {v} outside [0, 600]")
        if self.exit_fl is None:
            object.__setattr__(self, "exit_fl", self.cleared_fl)
        object.__setattr__(self, "track", float(self.track) % 360.0)

    def to_json(self) -> dict:
        return {
            "callsign": self.callsign,
            "time": format_time(self.time),
            "lat": self.position.lat,
            "lon": self.position.lon,
            "fl": self.current_fl,
            "cfl": self.cleared_fl,
            "xfl": self.exit_fl,
            "gs": self.ground_speed,
            "track": self.track,
            "rocd": self.rocd,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AircraftState":
        return cls(
            callsign=obj["callsign"],
            time=parse_time(obj["time"]),
            position=GeoPoint(float(obj["lat"]), float(obj["lon"])),
            current_fl=float(obj["fl"]),
            cleared_fl=float(obj.get("cfl", obj["fl"])),
            ground_speed=float(obj["gs"]),
            track=float(obj["track"]),
            rocd=float(obj.get("rocd", 0.0)),
            exit_fl=None if obj.get("xfl") is None else float(obj["xfl"]),
        )


FOLLOW_ROUTE = "follow_route"
DIRECT_TO = "direct_to"
HEADING = "heading"
LEVEL = "level"
CLEARANCE_KINDS = (FOLLOW_ROUTE, DIRECT_TO, HEADING, LEVEL)


@dataclass(frozen=True)
class Clearance:
    callsign: str
    issued_at: float
    kind: str = FOLLOW_ROUTE
    value: object = None

    def __post_init__(self):
        if self.kind not in CLEARANCE_KINDS:
            raise TrafficError(f"unknown clearance kind {self.kind!r}")
        if self.kind == DIRECT_TO and not isinstance(self.value, str):
            raise TrafficError("direct_to clearance needs a waypoint name")
        if self.kind in (HEADING, LEVEL) and not isinstance(self.value, (int, float)):
            raise TrafficError(f"{self.kind} clearance needs a numeric value")

    def check_against(self, plan: Optional[FlightPlan]) -> None:
        if self.kind == DIRECT_TO:
            if plan is None or self.value not in plan.names:
                raise TrafficError(f"{self.callsign}: direct-to target {self.value} not in plan")

    def to_json(self) -> dict:
        out = {"callsign": self.callsign, "issued_at": format_time(self.issued_at), "kind": self.kind}
        if self.value is not None:
            out["value"] = self.value
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Clearance":
        return cls(obj["callsign"], parse_time(obj["issued_at"]), obj.get("kind", FOLLOW_ROUTE), obj.get("value"))


@dataclass(frozen=True)
class Sector:
    name: str
    boundary: tuple[GeoPoint, ...]
    fl_min: float
    fl_max: float

    def __post_init__(self):
        object.__setattr__(self, "boundary", tuple(self.boundary))
        if len(self.boundary) < 3:
            raise TrafficError("sector boundary needs at least 3 vertices")
        if not self.fl_min < self.fl_max:
            raise TrafficError("sector fl_min must be below fl_max")

    def contains_laterally(self, lat, lon):
        return geo.points_in_polygon(lat, lon, self.boundary)

    def contains(self, lat, lon, fl):
        fl = np.atleast_1d(np.asarray(fl, dtype=float))
        return self.contains_laterally(lat, lon) & (fl >= self.fl_min) & (fl <= self.fl_max)

    def contains_point(self, p: GeoPoint) -> bool:
        return bool(self.contains_laterally(p.lat, p.lon)[0])

    @property
    def centroid(self) -> GeoPoint:
        return GeoPoint(
            float(np.mean([p.lat for p in self.boundary])), float(np.mean([p.lon for p in self.boundary]))
        )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "boundary": [p.to_json() for p in self.boundary],
            "fl_min": self.fl_min,
            "fl_max": self.fl_max,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Sector":
        return cls(obj["name"], tuple(GeoPoint.from_json(p) for p in obj["boundary"]), obj["fl_min"], obj["fl_max"])


@dataclass
class PredictedTrajectory:
    callsign: str
    times: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    fl_lower: np.ndarray
    fl_upper: np.ndarray
    fl_nominal: np.ndarray
    extrapolated: bool = False

    def __post_init__(self):
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise TrafficError("trajectory times must be strictly increasing")
        if np.any(self.fl_lower > self.fl_upper):
            raise TrafficError("fl_lower above fl_upper")

    def __len__(self):
        return len(self.times)

    @property
    def samples(self):
        return [
            (float(t), GeoPoint(float(la), float(lo)), float(a), float(b))
            for t, la, lo, a, b in zip(self.times, self.lat, self.lon, self.fl_lower, self.fl_upper)
        ]

    def track(self):
        return [(float(t), GeoPoint(float(la), float(lo))) for t, la, lo in zip(self.times, self.lat, self.lon)]

    def arc_length_nm(self) -> float:
        return float(np.sum(geo.np_haversine_nm(self.lat[:-1], self.lon[:-1], self.lat[1:], self.lon[1:])))


@dataclass(frozen=True)
class FlightBundle:
    """Everything known about one flight in a traffic snapshot."""

    state: AircraftState
    plan: Optional[FlightPlan] = None
    clearance: Optional[Clearance] = None

    @property
    def callsign(self) -> str:
        return self.state.callsign

    def to_json(self) -> dict:
        out = {"state": self.state.to_json()}
        if self.plan is not None:
            out["plan"] = self.plan.to_json()
        if self.clearance is not None:
            out["clearance"] = self.clearance.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FlightBundle":
        plan = FlightPlan.from_json(obj["plan"]) if obj.get("plan") else None
        clr = Clearance.from_json(obj["clearance"]) if obj.get("clearance") else None
        return cls(AircraftState.from_json(obj["state"]), plan, clr)


@dataclass
class Scenario:
    """A static traffic snapshot, optionally carrying controller labels.

    ``labels`` maps callsign to either a consolidated label string
    (``highly_relevant``, ``some_relevancy``, ``not_relevant``) or a raw survey
    record ``{"proposed": bool, "responses": [...]}``.
    """

    time: float
    flights: list[FlightBundle]
    subject: Optional[str] = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for f in self.flights:
            if f.callsign in seen:
                raise TrafficError(f"duplicate callsign {f.callsign} in scenario")
            seen.add(f.callsign)
        if self.subject is not None and self.subject not in seen:
            raise TrafficError(f"subject {self.subject} not in scenario")

    def by_callsign(self) -> dict[str, FlightBundle]:
        return {f.callsign: f for f in self.flights}

    def to_json(self) -> dict:
        out = {"time": format_time(self.time), "flights": [f.to_json() for f in self.flights]}
        if self.subject is not None:
            out["subject"] = self.subject
        if self.labels:
            out["labels"] = self.labels
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Scenario":
        return cls(
            parse_time(obj["time"]),
            [FlightBundle.from_json(f) for f in obj["flights"]],
            obj.get("subject"),
            dict(obj.get("labels") or {}),
        )


def load_scenarios(path) -> list[Scenario]:
    """Read scenarios from a ``.json`` file (one object or a list), a
    ``.jsonl`` file, or a directory of such files."""
    path = Path(path)
    if path.is_dir():
        out = []
        for p in sorted(path.iterdir()):
            if p.suffix in (".json", ".jsonl") and p.name.startswith("scenario"):
                out.extend(load_scenarios(p))
        return out
    text = path.read_text()
    if path.suffix == ".jsonl":
        return [Scenario.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]
    obj = json.loads(text)
    if isinstance(obj, list):
        return [Scenario.from_json(o) for o in obj]
    return [Scenario.from_json(obj)]


# ---------------------------------------------------------------------------
# trajectory prediction


def _time_grid(start: float, horizon_s: float, step_s: float) -> np.ndarray:
    if horizon_s <= 0:
        raise TrafficError("horizon must be positive")
    n = int(math.floor(horizon_s / step_s + 1e-9))
    return start + step_s * np.arange(n + 1)


def _along_path(lats, lons, dist, final_bearing):
    """Positions at along-path distances ``dist`` on a great-circle polyline.

    Distances past the end continue along ``final_bearing``. Returns
    ``(lat, lon, extrapolated_any)``.
    """
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    dist = np.asarray(dist, dtype=float)
    if len(lats) > 1:
        seg = geo.np_haversine_nm(lats[:-1], lons[:-1], lats[1:], lons[1:])
        cum = np.concatenate([[0.0], np.cumsum(seg)])
    else:
        seg = np.zeros(0)
        cum = np.zeros(1)
    total = cum[-1]
    out_lat = np.empty_like(dist)
    out_lon = np.empty_like(dist)
    on = dist <= total
    if np.any(on) and len(seg):
        d = dist[on]
        k = np.clip(np.searchsorted(cum, d, side="right") - 1, 0, len(seg) - 1)
        frac = np.where(seg[k] > 0, (d - cum[k]) / np.where(seg[k] > 0, seg[k], 1.0), 0.0)
        la, lo = geo.np_interpolate(lats[k], lons[k], lats[k + 1], lons[k + 1], frac)
        out_lat[on] = la
        out_lon[on] = lo
    elif np.any(on):
        out_lat[on] = lats[0]
        out_lon[on] = lons[0]
    off = ~on
    if np.any(off):
        la, lo = geo.np_destination(lats[-1], lons[-1], final_bearing, dist[off] - total)
        out_lat[off] = la
        out_lon[off] = lo
    return out_lat, out_lon, bool(np.any(off))


def _final_bearing(lats, lons) -> float:
    # bearing on arrival at the last point, continuing the great circle
    back = geo.np_bearing_deg(lats[-1], lons[-1], lats[-2], lons[-2])
    return float((back + 180.0) % 360.0)


def snap_to_route(position: GeoPoint, plan: FlightPlan):
    """Closest point on the plan polyline.

    Returns ``(segment_index, snapped_point, beyond_end)``; ``beyond_end`` is set
    when the aircraft lies past the final waypoint along the final leg.
    """
    frame = geo.LocalFrame(position)
    lat = np.array([w.position.lat for w in plan.waypoints])
    lon = np.array([w.position.lon for w in plan.waypoints])
    x, y = frame.project(lat, lon)
    d, u = geo.point_segment_distance(0.0, 0.0, x[:-1], y[:-1], x[1:], y[1:])
    # ties go to the later segment
    k = len(d) - 1 - int(np.argmin(d[::-1]))
    dx, dy = x[k + 1] - x[k], y[k + 1] - y[k]
    den = dx * dx + dy * dy
    u_raw = ((0.0 - x[k]) * dx + (0.0 - y[k]) * dy) / den if den > 0 else 0.0
    beyond = k == len(d) - 1 and u_raw > 1.0
    snapped = frame.unproject_point(x[k] + u[k] * dx, y[k] + u[k] * dy)
    return k, snapped, beyond


def _route_path(state: AircraftState, plan: FlightPlan, clearance: Optional[Clearance]):
    """Lateral path (lats, lons) and final bearing implied by a clearance."""
    lats_all = np.array([w.position.lat for w in plan.waypoints])
    lons_all = np.array([w.position.lon for w in plan.waypoints])
    final_brg = _final_bearing(lats_all, lons_all)
    if clearance is not None and clearance.kind == DIRECT_TO:
        i = plan.index_of(clearance.value)
        lats = np.concatenate([[state.position.lat], lats_all[i:]])
        lons = np.concatenate([[state.position.lon], lons_all[i:]])
        if geo.great_circle_nm(state.position, plan.waypoints[i].position) < 1e-6:
            lats, lons = lats[1:], lons[1:]
        if len(lats) == 1:
            final_brg = state.track if i == 0 else final_brg
        return lats, lons, final_brg, False
    k, snapped, beyond = snap_to_route(state.position, plan)
    if beyond:
        return np.array([state.position.lat]), np.array([state.position.lon]), final_brg, True
    lats = np.concatenate([[snapped.lat], lats_all[k + 1 :]])
    lons = np.concatenate([[snapped.lon], lons_all[k + 1 :]])
    if len(lats) > 1 and geo.np_haversine_nm(lats[0], lons[0], lats[1], lons[1]) < 1e-9:
        lats, lons = lats[1:], lons[1:]
    return lats, lons, final_brg, False


def predict_lateral(
    state: AircraftState,
    plan: Optional[FlightPlan],
    clearance: Optional[Clearance],
    horizon_s: float,
    step_s: float = STEP_S,
) -> PredictedTrajectory:
    """Constant-speed lateral rollout on the sampling grid.

    Without a plan, or under a heading clearance, the aircraft holds a
    constant track. Flight levels are filled with the current level.
    """
    times = _time_grid(state.time, horizon_s, step_s)
    dist = state.ground_speed * (times - state.time) / 3600.0
    if clearance is not None:
        clearance.check_against(plan)
    extrapolated = False
    if plan is None or (clearance is not None and clearance.kind == HEADING):
        heading = state.track if clearance is None or clearance.kind != HEADING else float(clearance.value)
        lat, lon = geo.np_destination(state.position.lat, state.position.lon, heading, dist)
    else:
        lats, lons, final_brg, beyond = _route_path(state, plan, clearance)
        lat, lon, past_end = _along_path(lats, lons, dist, final_brg)
        extrapolated = beyond or past_end
    fl = np.full(times.shape, float(state.current_fl))
    return PredictedTrajectory(state.callsign, times, lat, lon, fl, fl.copy(), fl.copy(), extrapolated)


def predict_vertical_cone(
    state: AircraftState,
    horizon_s: float,
    step_s: float = STEP_S,
    sigma_rocd_fraction: float = SIGMA_ROCD_FRACTION,
    cleared_fl: Optional[float] = None,
):
    """Nominal level profile with a linearly widening 2-sigma band.

    Returns ``(times, fl_lower, fl_upper, fl_nominal)``. The band half-width is
    ``2 * sigma_rocd_fraction * |rocd| * t`` and freezes at level-off.
    """
    times = _time_grid(state.time, horizon_s, step_s)
    t_min = (times - state.time) / 60.0
    current = float(state.current_fl)
    target = float(state.cleared_fl if cleared_fl is None else cleared_fl)
    rate = abs(state.rocd) / 100.0  # FL per minute
    gap = target - current
    if rate == 0.0 or gap == 0.0:
        nominal = np.full(times.shape, current)
        return times, nominal.copy(), nominal.copy(), nominal
    direction = math.copysign(1.0, gap)
    t_level = abs(gap) / rate
    t_eff = np.minimum(t_min, t_level)
    nominal = current + direction * rate * t_eff
    half = 2.0 * sigma_rocd_fraction * rate * t_eff
    return times, nominal - half, nominal + half, nominal


def predict(
    state: AircraftState,
    plan: Optional[FlightPlan],
    clearance: Optional[Clearance],
    horizon_s: float,
    step_s: float = STEP_S,
    sigma_rocd_fraction: float = SIGMA_ROCD_FRACTION,
) -> PredictedTrajectory:
    """Lateral rollout plus vertical cone."""
    traj = predict_lateral(state, plan, clearance, horizon_s, step_s)
    cfl = float(clearance.value) if clearance is not None and clearance.kind == LEVEL else None
    _, lo, hi, nom = predict_vertical_cone(state, horizon_s, step_s, sigma_rocd_fraction, cfl)
    return replace(traj, fl_lower=lo, fl_upper=hi, fl_nominal=nom)


def final_fix_index(plan: FlightPlan, sector: Sector) -> int:
    """Index of the last plan waypoint inside the sector, else the last waypoint."""
    lat = np.array([w.position.lat for w in plan.waypoints])
    lon = np.array([w.position.lon for w in plan.waypoints])
    inside = np.flatnonzero(sector.contains_laterally(lat, lon))
    return int(inside[-1]) if len(inside) else len(plan.waypoints) - 1


def subject_trajectories(
    state: AircraftState,
    plan: Optional[FlightPlan],
    clearance: Optional[Clearance],
    sector: Sector,
    horizon_s: float,
    step_s: float = STEP_S,
    sigma_rocd_fraction: float = SIGMA_ROCD_FRACTION,
) -> tuple[PredictedTrajectory, PredictedTrajectory]:
    """Clearance rollout and direct-to-final-fix rollout for a subject aircraft.

    When the final fix is already behind the aircraft (or there is no plan)
    both rollouts coincide.
    """
    first = predict(state, plan, clearance, horizon_s, step_s, sigma_rocd_fraction)
    if plan is None:
        return first, first
    fix = final_fix_index(plan, sector)
    seg, _, beyond = snap_to_route(state.position, plan)
    if beyond or fix <= seg:
        return first, first
    direct = Clearance(state.callsign, state.time, DIRECT_TO, plan.waypoints[fix].name)
    if clearance is not None and clearance.kind == LEVEL:
        # keep the vertical intent of a level clearance on the direct path
        second = predict(state, plan, direct, horizon_s, step_s, sigma_rocd_fraction)
        second = replace(second, fl_lower=first.fl_lower, fl_upper=first.fl_upper, fl_nominal=first.fl_nominal)
    else:
        second = predict(state, plan, direct, horizon_s, step_s, sigma_rocd_fraction)
    return first, second


def route_length_to(state: AircraftState, plan: FlightPlan, clearance: Optional[Clearance], fix: int) -> float:
    """Along-path distance from the aircraft to plan waypoint ``fix`` under a clearance."""
    lats, lons, _, _ = _route_path(state, plan, clearance)
    target = plan.waypoints[fix].position
    total = 0.0
    if clearance is None or clearance.kind != DIRECT_TO:
        total = geo.great_circle_nm(state.position, GeoPoint(float(lats[0]), float(lons[0])))
    for i in range(len(lats) - 1):
        total += float(geo.np_haversine_nm(lats[i], lons[i], lats[i + 1], lons[i + 1]))
        if abs(lats[i + 1] - target.lat) < 1e-12 and abs(lons[i + 1] - target.lon) < 1e-12:
            return total
    if len(lats) == 1 and GeoPoint(float(lats[0]), float(lons[0])) == target:
        return total
    raise TrafficError("fix not on predicted path")
