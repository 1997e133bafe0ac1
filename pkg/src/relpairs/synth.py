"""Seeded synthetic sector and traffic.

Flights arrive on each flow as a (possibly time-varying) Poisson process, fly
their plan at constant ground speed, and change level once at a drawn
along-route distance. Each flight gets one update message roughly an hour
before it reaches the sector, whose predicted times equal the true times
shifted by a single Gaussian delay.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geo, traffic
from .geo import GeoPoint
from .ingest import FlightUpdateMessage
from .relevance import FilterParams, scenario_relevant_pairs
from .timeutil import format_time, parse_time
from .traffic import AircraftState, Clearance, FlightBundle, FlightPlan, Scenario, Sector, Waypoint

SCENARIO_CADENCE_MIN = 2.0


class WorldSpecError(ValueError):
    pass


@dataclass
class Flow:
    name: str
    routes: list  # each a list of waypoint names
    rate_per_hour: float
    speed_mean: float = 440.0
    speed_sd: float = 20.0
    initial_fl: float = 260.0
    cleared_fl: float = 260.0
    rocd_mean: float = 0.0  # ft/min magnitude
    rocd_sd: float = 0.0
    level_change_nm_mean: float = 0.0
    level_change_nm_sd: float = 0.0
    rate_profile: Optional[list] = None  # [[hour_of_day, multiplier], ...]
    callsign_prefix: str = "SYN"
    adep: str = "ZZZZ"
    ades: str = "ZZZZ"

    def rate_at(self, t: float) -> float:
        if not self.rate_profile:
            return self.rate_per_hour
        hours = (t / 3600.0) % 24.0
        xs = [p[0] for p in self.rate_profile]
        ys = [p[1] for p in self.rate_profile]
        return self.rate_per_hour * float(np.interp(hours, xs, ys))

    def max_rate(self) -> float:
        if not self.rate_profile:
            return self.rate_per_hour
        return self.rate_per_hour * max(p[1] for p in self.rate_profile)


@dataclass
class WorldSpec:
    seed: int
    sector: Sector
    waypoints: dict  # name -> GeoPoint
    flows: list
    start: float
    duration_h: float
    jitter_sd_min: float = 5.0
    message_lead_min: tuple = (55.0, 65.0)

    def validate(self) -> None:
        if self.duration_h <= 0:
            raise WorldSpecError("duration must be positive")
        for flow in self.flows:
            if flow.rate_per_hour < 0:
                raise WorldSpecError(f"flow {flow.name}: negative rate")
            if not flow.routes:
                raise WorldSpecError(f"flow {flow.name}: no routes")
            for route in flow.routes:
                for name in route:
                    if name not in self.waypoints:
                        raise WorldSpecError(f"flow {flow.name}: unknown waypoint {name}")
                plan = self.plan_for("VALID", route, flow)
                lat = [w.position.lat for w in plan.waypoints]
                lon = [w.position.lon for w in plan.waypoints]
                if not np.any(self.sector.contains_laterally(lat, lon)):
                    raise WorldSpecError(f"flow {flow.name}: route {route} does not cross the sector")

    def plan_for(self, callsign: str, route: Sequence[str], flow: Flow) -> FlightPlan:
        return FlightPlan(callsign, flow.adep, flow.ades, tuple(Waypoint(n, self.waypoints[n]) for n in route))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "sector": self.sector.to_json(),
            "waypoints": {k: v.to_json() for k, v in sorted(self.waypoints.items())},
            "flows": [asdict(f) for f in self.flows],
            "start": format_time(self.start),
            "duration_h": self.duration_h,
            "jitter_sd_min": self.jitter_sd_min,
            "message_lead_min": list(self.message_lead_min),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WorldSpec":
        return cls(
            seed=int(obj["seed"]),
            sector=Sector.from_json(obj["sector"]),
            waypoints={k: GeoPoint.from_json(v) for k, v in obj["waypoints"].items()},
            flows=[Flow(**f) for f in obj["flows"]],
            start=parse_time(obj["start"]),
            duration_h=float(obj["duration_h"]),
            jitter_sd_min=float(obj.get("jitter_sd_min", 5.0)),
            message_lead_min=tuple(obj.get("message_lead_min", (55.0, 65.0))),
        )


@dataclass
class SynthFlight:
    callsign: str
    flow: str
    plan: FlightPlan
    t_start: float
    speed: float
    initial_fl: float
    cleared_fl: float
    rocd: float  # ft/min magnitude
    level_change_nm: float
    delay_s: float
    msg_time: float
    cum_nm: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        lat = np.array([w.position.lat for w in self.plan.waypoints])
        lon = np.array([w.position.lon for w in self.plan.waypoints])
        seg = geo.np_haversine_nm(lat[:-1], lon[:-1], lat[1:], lon[1:])
        self.cum_nm = np.concatenate([[0.0], np.cumsum(seg)])
        self._lat = lat
        self._lon = lon

    @property
    def t_end(self) -> float:
        return self.t_start + self.cum_nm[-1] / self.speed * 3600.0

    def waypoint_times(self) -> np.ndarray:
        return self.t_start + self.cum_nm / self.speed * 3600.0

    def level_at(self, t: float) -> tuple[float, float, float]:
        """``(current_fl, cleared_fl, rocd)`` at time ``t``."""
        gap = self.cleared_fl - self.initial_fl
        if gap == 0 or self.rocd <= 0:
            return self.initial_fl, self.initial_fl, 0.0
        t_change = self.t_start + self.level_change_nm / self.speed * 3600.0
        if t < t_change:
            return self.initial_fl, self.initial_fl, 0.0
        rate = self.rocd / 100.0
        done = t_change + abs(gap) / rate * 60.0
        if t >= done:
            return self.cleared_fl, self.cleared_fl, 0.0
        sign = 1.0 if gap > 0 else -1.0
        return self.initial_fl + sign * rate * (t - t_change) / 60.0, self.cleared_fl, sign * self.rocd

    def position_at(self, t: float) -> tuple[GeoPoint, float]:
        s = self.speed * (t - self.t_start) / 3600.0
        s = min(max(s, 0.0), self.cum_nm[-1])
        k = int(np.clip(np.searchsorted(self.cum_nm, s, side="right") - 1, 0, len(self.cum_nm) - 2))
        frac = (s - self.cum_nm[k]) / (self.cum_nm[k + 1] - self.cum_nm[k])
        la, lo = geo.np_interpolate(self._lat[k], self._lon[k], self._lat[k + 1], self._lon[k + 1], frac)
        pos = GeoPoint(float(la), float(lo))
        nxt = self.plan.waypoints[k + 1].position
        if geo.great_circle_nm(pos, nxt) > 1e-6:
            track = geo.initial_bearing_deg(pos, nxt)
        else:
            track = traffic._final_bearing(self._lat[: k + 2], self._lon[: k + 2])
        return pos, track

    def state_at(self, t: float) -> AircraftState:
        pos, track = self.position_at(t)
        fl, cfl, rocd = self.level_at(t)
        return AircraftState(self.callsign, t, pos, fl, cfl, self.speed, track, rocd, self.cleared_fl)

    def bundle_at(self, t: float) -> FlightBundle:
        return FlightBundle(self.state_at(t), self.plan, Clearance(self.callsign, self.t_start, traffic.FOLLOW_ROUTE))

    def message(self) -> FlightUpdateMessage:
        times = self.waypoint_times() + self.delay_s
        return FlightUpdateMessage(
            self.msg_time, self.callsign, self.plan.origin, self.plan.destination,
            tuple(self.plan.names), tuple(float(round(x, 3)) for x in times),
        )


class World:
    def __init__(self, spec: WorldSpec, flights: list[SynthFlight], params: Optional[FilterParams] = None):
        self.spec = spec
        self.flights = flights
        self.params = params or FilterParams()
        self._truth_cache: dict[float, int] = {}

    @property
    def end(self) -> float:
        return self.spec.start + self.spec.duration_h * 3600.0

    def plans(self) -> list[FlightPlan]:
        return [f.plan for f in self.flights]

    def messages(self) -> list[FlightUpdateMessage]:
        return sorted((f.message() for f in self.flights), key=lambda m: (m.msg_time, m.callsign))

    @cached_property
    def _starts(self):
        return np.array([f.t_start for f in self.flights]), np.array([f.t_end for f in self.flights])

    def scenario_at(self, t: float) -> Scenario:
        starts, ends = self._starts
        live = np.flatnonzero((starts <= t) & (ends >= t)) if len(starts) else []
        return Scenario(float(t), [self.flights[i].bundle_at(t) for i in live])

    def sample_times(self, cadence_min: float = SCENARIO_CADENCE_MIN, start=None, end=None) -> np.ndarray:
        start = self.spec.start if start is None else start
        end = self.end if end is None else end
        n = int(np.floor((end - start) / (cadence_min * 60.0) + 1e-9))
        return start + cadence_min * 60.0 * np.arange(n + 1)

    def scenarios(self, cadence_min: float = SCENARIO_CADENCE_MIN) -> list[Scenario]:
        return [self.scenario_at(t) for t in self.sample_times(cadence_min)]

    def relevant_pairs_at(self, t: float) -> set:
        return scenario_relevant_pairs(self.scenario_at(t), self.spec.sector, self.params)

    def truth(self, times) -> np.ndarray:
        out = []
        for t in times:
            key = round(float(t), 3)
            if key not in self._truth_cache:
                self._truth_cache[key] = len(self.relevant_pairs_at(key))
            out.append(self._truth_cache[key])
        return np.array(out, dtype=int)

    def in_sector_count(self, t: float) -> int:
        sc = self.scenario_at(t)
        return sum(
            bool(self.spec.sector.contains(f.state.position.lat, f.state.position.lon, f.state.current_fl)[0])
            for f in sc.flights
        )

    def write(self, out_dir, truth_cadence_min: float = 1.0, scenario_cadence_min: float = SCENARIO_CADENCE_MIN,
              config: Optional[dict] = None) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = {"config": config or {}, "world": self.spec.to_json()}
        (out / "world.json").write_text(json.dumps(header, indent=1))
        (out / "plans.json").write_text(json.dumps(
            {"sector": self.spec.sector.to_json(), "config": config or {}, "plans": [p.to_json() for p in self.plans()]}
        ))
        with open(out / "messages.jsonl", "w") as fh:
            for m in self.messages():
                fh.write(m.to_line() + "\n")
        with open(out / "scenarios.jsonl", "w") as fh:
            for sc in self.scenarios(scenario_cadence_min):
                fh.write(json.dumps(sc.to_json(), separators=(",", ":")) + "\n")
        times = self.sample_times(truth_cadence_min)
        truth = self.truth(times)
        with open(out / "truth.csv", "w", newline="") as fh:
            fh.write("# config: " + json.dumps(config or {}, sort_keys=True) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "relevant_pairs"])
            for t, n in zip(times, truth):
                w.writerow([format_time(t), int(n)])
        return {"flights": len(self.flights), "messages": len(self.flights), "truth_points": len(times)}


def _arrivals(rng: np.random.Generator, flow: Flow, start: float, end: float) -> list[float]:
    """Inhomogeneous Poisson arrivals by thinning."""
    peak = flow.max_rate()
    if peak <= 0:
        return []
    out = []
    t = start
    while True:
        t += rng.exponential(3600.0 / peak)
        if t > end:
            return out
        if rng.random() * peak <= flow.rate_at(t):
            out.append(t)


def generate_world(spec: WorldSpec, params: Optional[FilterParams] = None) -> World:
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    end = spec.start + spec.duration_h * 3600.0
    flights = []
    for fi, flow in enumerate(spec.flows):
        for k, t0 in enumerate(_arrivals(rng, flow, spec.start, end)):
            route = flow.routes[int(rng.integers(len(flow.routes)))]
            speed = float(np.clip(rng.normal(flow.speed_mean, flow.speed_sd), 250.0, 560.0))
            rocd = float(np.clip(abs(rng.normal(flow.rocd_mean, flow.rocd_sd)), 0.0, 4000.0))
            if flow.rocd_mean > 0:
                rocd = max(rocd, 300.0)
            change_nm = float(max(rng.normal(flow.level_change_nm_mean, flow.level_change_nm_sd), 0.0))
            delay = float(rng.normal(0.0, spec.jitter_sd_min * 60.0))
            lead = float(rng.uniform(*spec.message_lead_min)) * 60.0
            callsign = f"{flow.callsign_prefix}{fi}{k:04d}"
            plan = spec.plan_for(callsign, route, flow)
            f = SynthFlight(callsign, flow.name, plan, float(round(t0, 3)), speed, flow.initial_fl,
                            flow.cleared_fl, rocd, change_nm, delay, 0.0)
            f.msg_time = float(round(_sector_entry_time(f, spec.sector) - lead, 3))
            flights.append(f)
    flights.sort(key=lambda f: (f.t_start, f.callsign))
    return World(spec, flights, params)


def _sector_entry_time(f: SynthFlight, sector: Sector) -> float:
    lat = np.array([w.position.lat for w in f.plan.waypoints])
    lon = np.array([w.position.lon for w in f.plan.waypoints])
    inside = np.flatnonzero(sector.contains_laterally(lat, lon))
    first = int(inside[0]) if len(inside) else 0
    # entry is taken at the waypoint before the first inside one
    return float(f.waypoint_times()[max(first - 1, 0)])


# ---------------------------------------------------------------------------
# presets

CENTRE = GeoPoint(51.6, -0.9)

_PRESET_WAYPOINTS = {
    # climbing flow, west-north-west to east-south-east
    "WELKO": (-110.0, 38.0), "BARDI": (-62.0, 22.0), "BARDX": (-60.0, 27.0), "CALMO": (-25.0, 9.0),
    "DENUT": (20.0, -6.0), "EXMOR": (62.0, -20.0), "FAWLY": (110.0, -36.0),
    # descending flow, south-south-east to north-north-west
    "SOLEX": (35.0, -110.0), "RIPAN": (22.0, -62.0), "RIPAX": (27.0, -58.0), "QUBAL": (8.0, -20.0),
    "PENIR": (-6.0, 22.0), "OSLAK": (-20.0, 64.0), "NUVAN": (-35.0, 112.0),
    # in-trail descent, east to west-north-west along the north side
    "TALGA": (115.0, 5.0), "UMBER": (65.0, 22.0), "VIRGO": (20.0, 38.0), "WOLDS": (-25.0, 52.0),
    "XERES": (-75.0, 68.0),
}


def preset_sector(centre: GeoPoint = CENTRE, radius_nm: float = 60.0) -> Sector:
    boundary = tuple(geo.destination(centre, brg, radius_nm) for brg in range(0, 360, 60))
    return Sector("SYNTH-MID", boundary, 215.0, 305.0)


def preset_waypoints(centre: GeoPoint = CENTRE) -> dict:
    frame = geo.LocalFrame(centre)
    return {name: frame.unproject_point(x, y) for name, (x, y) in _PRESET_WAYPOINTS.items()}


def crossing_flows_preset(seed: int = 0, start="2025-05-14T04:00:00Z", duration_h: float = 13.5,
                          rate_scale: float = 1.0) -> WorldSpec:
    """Climbing and descending flows crossing mid-sector plus a speed-controlled in-trail stream."""
    flows = [
        Flow(
            "climb-ese",
            [["WELKO", "BARDI", "CALMO", "DENUT", "EXMOR", "FAWLY"],
             ["WELKO", "BARDI", "DENUT", "EXMOR", "FAWLY"],
             ["WELKO", "BARDX", "CALMO", "DENUT", "FAWLY"]],
            rate_per_hour=8.0 * rate_scale, speed_mean=430.0, speed_sd=25.0,
            initial_fl=220.0, cleared_fl=300.0, rocd_mean=900.0, rocd_sd=250.0,
            level_change_nm_mean=55.0, level_change_nm_sd=15.0,
            rate_profile=[[0, 0.3], [4, 0.3], [7, 1.6], [10, 1.3], [13, 0.5], [16, 0.4], [24, 0.3]],
            callsign_prefix="CLB", adep="EGLL", ades="EDDF",
        ),
        Flow(
            "descent-nnw",
            [["SOLEX", "RIPAN", "QUBAL", "PENIR", "OSLAK", "NUVAN"],
             ["SOLEX", "RIPAN", "PENIR", "OSLAK", "NUVAN"],
             ["SOLEX", "RIPAX", "QUBAL", "OSLAK", "NUVAN"]],
            rate_per_hour=8.0 * rate_scale, speed_mean=420.0, speed_sd=25.0,
            initial_fl=300.0, cleared_fl=220.0, rocd_mean=900.0, rocd_sd=250.0,
            level_change_nm_mean=50.0, level_change_nm_sd=15.0,
            rate_profile=[[0, 0.3], [4, 0.3], [8, 0.5], [11, 1.5], [13, 1.6], [15, 0.6], [24, 0.3]],
            callsign_prefix="DES", adep="LFPG", ades="EGCC",
        ),
        Flow(
            "intrail-wnw",
            [["TALGA", "UMBER", "VIRGO", "WOLDS", "XERES"]],
            rate_per_hour=10.0 * rate_scale, speed_mean=400.0, speed_sd=0.0,
            initial_fl=300.0, cleared_fl=260.0, rocd_mean=500.0, rocd_sd=100.0,
            level_change_nm_mean=40.0, level_change_nm_sd=10.0,
            rate_profile=[[0, 0.2], [4, 0.2], [9, 0.3], [12, 0.8], [14, 1.8], [16, 2.0], [24, 0.5]],
            callsign_prefix="TRL", adep="EHAM", ades="EGGD",
        ),
    ]
    return WorldSpec(
        seed=seed,
        sector=preset_sector(),
        waypoints=preset_waypoints(),
        flows=flows,
        start=parse_time(start),
        duration_h=duration_h,
    )


PRESETS = {"crossing-flows": crossing_flows_preset}


def random_corpus(seed: int, n_routes: int = 12, n_plans: int = 40, sector: Optional[Sector] = None):
    """Random straight-ish routes through the preset sector, each with 4-7 waypoints.

    Routes share some waypoints so the raw network has junctions.
    """
    sector = sector or preset_sector()
    rng = np.random.Generator(np.random.PCG64(seed))
    frame = geo.LocalFrame(CENTRE)
    pool: dict[str, GeoPoint] = {}
    routes = []
    for r in range(n_routes):
        theta = rng.uniform(0, 2 * np.pi)
        offset = rng.uniform(-35, 35)
        n = int(rng.integers(4, 8))
        along = np.sort(rng.uniform(-95, 95, size=n))
        along[0], along[-1] = -110.0, 110.0
        pts = []
        for i, a in enumerate(along):
            jitter = rng.normal(0, 2.0)
            x = a * np.cos(theta) - (offset + jitter) * np.sin(theta)
            y = a * np.sin(theta) + (offset + jitter) * np.cos(theta)
            pts.append((x, y))
        names = []
        for x, y in pts:
            # reuse an existing waypoint if one is close
            best = None
            for name, p in pool.items():
                px, py = frame.project_point(p)
                if np.hypot(px - x, py - y) < 4.0:
                    best = name
                    break
            if best is None:
                best = f"R{len(pool):04d}"
                pool[best] = frame.unproject_point(float(x), float(y))
            if not names or names[-1] != best:
                names.append(best)
        if len(names) >= 2:
            routes.append(names)
    plans = []
    for k in range(n_plans):
        route = routes[int(rng.integers(len(routes)))]
        wps = tuple(Waypoint(n, pool[n]) for n in route)
        if len({w.name for w in wps}) != len(wps):
            continue
        plans.append(FlightPlan(f"RND{k:04d}", "ZZZZ", "ZZZZ", wps))
    return plans, sector
