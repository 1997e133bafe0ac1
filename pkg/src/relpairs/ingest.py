"""Flight-update message stream and the live flight store.

Wire format: one JSON object per line with ``msg_time``, ``callsign``,
``adep``, ``ades``, ``waypoints`` (names) and ``times`` (RFC 3339, one per
waypoint).
"""
from __future__ import annotations

import json
import logging
import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Optional

from .occupancy import DEFAULT_SIGMA_MIN, ArrivalTimeline, TimingError, interpolate_arrivals, occupancy_at
from .route_graph import GraphError, RouteGraph, map_route
from .timeutil import format_time, parse_time
from .traffic import FlightPlan, TrafficError, Waypoint, validate_callsign

log = logging.getLogger(__name__)

HISTORY_LEN = 10
DEFAULT_TTL_MIN = 90.0
EXITED_MASS = 0.999


class MessageParseError(ValueError):
    def __init__(self, reason: str, field_path: str = ""):
        super().__init__(f"{field_path}: {reason}" if field_path else reason)
        self.reason = reason
        self.field_path = field_path


@dataclass(frozen=True)
class FlightUpdateMessage:
    msg_time: float
    callsign: str
    origin: str
    destination: str
    waypoints: tuple[str, ...]
    times: tuple[float, ...]

    def to_json(self) -> dict:
        return {
            "msg_time": format_time(self.msg_time),
            "callsign": self.callsign,
            "adep": self.origin,
            "ades": self.destination,
            "waypoints": list(self.waypoints),
            "times": [format_time(t) for t in self.times],
        }

    def to_line(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))


def parse_message(line: str) -> FlightUpdateMessage:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MessageParseError(f"invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise MessageParseError("record is not an object")
    for key in ("msg_time", "callsign", "waypoints", "times"):
        if key not in obj:
            raise MessageParseError("missing field", key)
    try:
        msg_time = parse_time(obj["msg_time"])
    except ValueError as exc:
        raise MessageParseError("malformed timestamp", "msg_time") from exc
    try:
        callsign = validate_callsign(obj["callsign"])
    except TrafficError as exc:
        raise MessageParseError("invalid callsign", "callsign") from exc
    wps = obj["waypoints"]
    times = obj["times"]
    if not isinstance(wps, list) or not all(isinstance(w, str) and w for w in wps):
        raise MessageParseError("waypoints must be a list of names", "waypoints")
    if not isinstance(times, list):
        raise MessageParseError("times must be a list", "times")
    if len(wps) != len(times):
        raise MessageParseError("length mismatch", "times")
    if len(wps) < 2:
        raise MessageParseError("need at least two waypoints", "waypoints")
    parsed = []
    for i, t in enumerate(times):
        try:
            parsed.append(parse_time(t))
        except ValueError as exc:
            raise MessageParseError("malformed timestamp", f"times[{i}]") from exc
    if any(b <= a for a, b in zip(parsed, parsed[1:])):
        raise MessageParseError("non-monotone predicted times", "times")
    return FlightUpdateMessage(
        msg_time, callsign, str(obj.get("adep", "")), str(obj.get("ades", "")), tuple(wps), tuple(parsed)
    )


@dataclass
class FlightRecord:
    message: FlightUpdateMessage
    status: str  # "mapped", "unmapped" or "off_graph"
    timeline: Optional[ArrivalTimeline] = None
    error: str = ""
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_LEN))

    @property
    def last_update(self) -> float:
        return self.message.msg_time


def _order_key(msg: FlightUpdateMessage):
    return (msg.msg_time, msg.to_line())


class FlightStore:
    """Latest-message-wins store of flights and their derived arrival timelines.

    One writer calls :meth:`apply`; readers take :meth:`snapshot`, which copies
    under the lock and never blocks longer than one application.
    """

    def __init__(self, ctx: RouteGraph, sigma_min: float = DEFAULT_SIGMA_MIN):
        self.ctx = ctx
        self.sigma_min = sigma_min
        self.records: dict[str, FlightRecord] = {}
        self.diagnostics: Counter = Counter()
        self._lock = threading.Lock()

    def _derive(self, msg: FlightUpdateMessage) -> FlightRecord:
        known = [(w, t) for w, t in zip(msg.waypoints, msg.times) if w in self.ctx.catalog]
        if len(known) < 2:
            return FlightRecord(msg, "unmapped", error="fewer than two known waypoints")
        # drop consecutive repeats so the plan is well formed
        wps, times = [], []
        for w, t in known:
            if wps and wps[-1].name == w:
                continue
            wps.append(Waypoint(w, self.ctx.catalog[w]))
            times.append(t)
        try:
            plan = FlightPlan(msg.callsign, msg.origin, msg.destination, tuple(wps))
            mapped = map_route(self.ctx, plan)
        except (GraphError, TrafficError) as exc:
            return FlightRecord(msg, "unmapped", error=str(exc))
        if len(mapped.path) < 2:
            return FlightRecord(msg, "off_graph", error="route does not cross the sector")
        try:
            timeline = interpolate_arrivals(msg.callsign, times, mapped, self.ctx.network, self.sigma_min,
                                           [w.position for w in wps])
        except TimingError as exc:
            return FlightRecord(msg, "unmapped", error=str(exc))
        return FlightRecord(msg, "mapped", timeline)

    def apply(self, msg: FlightUpdateMessage) -> bool:
        """Apply one message; returns False when it is stale or a duplicate."""
        current = self.records.get(msg.callsign)
        if current is not None and _order_key(msg) <= _order_key(current.message):
            self.diagnostics["stale"] += 1
            return False
        record = self._derive(msg)
        if current is not None:
            record.history = current.history
        record.history.append(msg)
        if record.status != "mapped":
            self.diagnostics[record.status] += 1
        with self._lock:
            self.records[msg.callsign] = record
        return True

    def apply_all(self, messages: Iterable[FlightUpdateMessage]) -> None:
        for m in messages:
            self.apply(m)

    def expire(self, now: float, ttl_min: float = DEFAULT_TTL_MIN) -> list[str]:
        """Drop flights not updated within ``ttl_min`` whose timelines have run out."""
        gone = []
        for cs, rec in self.records.items():
            if now - rec.last_update <= ttl_min * 60.0:
                continue
            if rec.timeline is None or occupancy_at(rec.timeline, now).post_exit > EXITED_MASS:
                gone.append(cs)
        with self._lock:
            for cs in gone:
                del self.records[cs]
        return gone

    def snapshot(self) -> Mapping[str, ArrivalTimeline]:
        with self._lock:
            items = {cs: r.timeline for cs, r in self.records.items() if r.timeline is not None}
        return MappingProxyType(dict(sorted(items.items())))

    def state(self) -> dict:
        """Comparable summary of the store contents."""
        return {
            cs: (r.message.to_line(), r.status, None if r.timeline is None else tuple(r.timeline.mu.round(6)))
            for cs, r in sorted(self.records.items())
        }


@dataclass
class IngestReport:
    accepted: int = 0
    rejected: list = field(default_factory=list)  # (line number, reason)


def read_messages(lines: Iterable[str], report: Optional[IngestReport] = None):
    """Parse lines, skipping blanks; rejected lines are recorded, never raised."""
    report = IngestReport() if report is None else report
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(parse_message(line))
            report.accepted += 1
        except MessageParseError as exc:
            report.rejected.append((lineno, str(exc)))
            log.debug("rejected line %d: %s", lineno, exc)
    return out, report


def ingest_lines(store: FlightStore, lines: Iterable[str]) -> IngestReport:
    messages, report = read_messages(lines)
    for m in messages:
        store.apply(m)
    return report
