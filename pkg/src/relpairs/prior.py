"""Monthly historic prior over leg-pair co-occupancy.

For every sampled traffic snapshot each flight is placed on a leg of its own
mapped path; every unordered flight pair then counts one co-occupancy of its
leg pair, and one relevant co-occupancy if the filter flags the pair.
"""
from __future__ import annotations

import itertools
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import geo
from .relevance import FilterParams, scenario_relevant_pairs
from .route_graph import GraphError, RouteGraph, map_route
from .timeutil import month_of
from .traffic import Scenario

log = logging.getLogger(__name__)

PRIOR_FORMAT = "relpairs-prior"
PRIOR_VERSION = 1
LEG_ASSIGN_MAX_NM = 5.0
SAMPLE_CADENCE_MIN = 2.0

_MONTH = re.compile(r"^(\d{4})-(\d{2})$")


class PriorError(ValueError):
    pass


class PriorGraphMismatch(PriorError):
    pass


def pair_key(leg_a: str, leg_b: str) -> tuple[str, str]:
    return (leg_a, leg_b) if leg_a <= leg_b else (leg_b, leg_a)


def parse_month(month: str) -> tuple[int, int]:
    m = _MONTH.match(month or "")
    if not m or not 1 <= int(m.group(2)) <= 12:
        raise PriorError(f"invalid month {month!r}")
    return int(m.group(1)), int(m.group(2))


@dataclass
class PriorTable:
    month: str
    counts: dict = field(default_factory=dict)  # pair key -> [n_cooccupied, n_relevant]

    def __post_init__(self):
        parse_month(self.month)
        self._matrix_cache = None

    def add(self, key: tuple[str, str], relevant: bool, n: int = 1) -> None:
        key = pair_key(*key)
        c = self.counts.setdefault(key, [0, 0])
        c[0] += n
        if relevant:
            c[1] += n
        self._matrix_cache = None

    def merge(self, other: "PriorTable") -> "PriorTable":
        for key, (n_co, n_rel) in other.counts.items():
            c = self.counts.setdefault(key, [0, 0])
            c[0] += n_co
            c[1] += n_rel
        self._matrix_cache = None
        return self

    def expectation_matrix(self, leg_index: dict[str, int]) -> np.ndarray:
        """Dense symmetric matrix of expectations over the graph's legs."""
        cache = self._matrix_cache
        if cache is not None and cache[0] is leg_index:
            return cache[1]
        mat = np.zeros((len(leg_index), len(leg_index)))
        for (a, b), (n_co, n_rel) in self.counts.items():
            if n_co and a in leg_index and b in leg_index:
                i, j = leg_index[a], leg_index[b]
                mat[i, j] = mat[j, i] = n_rel / n_co
        self._matrix_cache = (leg_index, mat)
        return mat


def expectation(prior: PriorTable, key: tuple[str, str]) -> float:
    """Fraction of co-occupancies that were relevant; zero for unseen pairs."""
    n_co, n_rel = prior.counts.get(pair_key(*key), (0, 0))
    return n_rel / n_co if n_co else 0.0


def current_leg(ctx: RouteGraph, path: list[str], position: geo.GeoPoint) -> tuple[Optional[str], float]:
    """Nearest leg of ``path`` by cross-track distance.

    A flight outside the corner between two legs is equally far from both;
    such exact ties go to the earlier leg in path order.
    """
    if len(path) < 2:
        return None, float("inf")
    frame = geo.LocalFrame(position)
    lat, lon = ctx.network.positions(path)
    x, y = frame.project(lat, lon)
    d, _ = geo.point_segment_distance(0.0, 0.0, x[:-1], y[:-1], x[1:], y[1:])
    k = int(np.flatnonzero(d <= d.min() + 1e-9)[0])
    return ctx.network.leg_id(path[k], path[k + 1]), float(d[k])


def assign_legs(scenario: Scenario, ctx: RouteGraph, diagnostics: Optional[Counter] = None) -> dict[str, str]:
    diagnostics = Counter() if diagnostics is None else diagnostics
    out = {}
    for f in scenario.flights:
        if f.plan is None:
            diagnostics["no_plan"] += 1
            continue
        try:
            mapped = map_route(ctx, f.plan)
        except GraphError:
            diagnostics["unmappable"] += 1
            continue
        leg, dist = current_leg(ctx, mapped.path, f.state.position)
        if leg is None:
            diagnostics["off_graph"] += 1
            continue
        if dist >= LEG_ASSIGN_MAX_NM:
            diagnostics["off_path"] += 1
            continue
        out[f.callsign] = leg
    return out


def accumulate_scenario(
    prior: PriorTable,
    scenario: Scenario,
    ctx: RouteGraph,
    params: FilterParams = FilterParams(),
    diagnostics: Optional[Counter] = None,
    relevant: Optional[set] = None,
) -> PriorTable:
    legs = assign_legs(scenario, ctx, diagnostics)
    if len(legs) < 2:
        return prior
    if relevant is None:
        relevant = scenario_relevant_pairs(scenario, ctx.sector, params)
    for a, b in itertools.combinations(sorted(legs), 2):
        prior.add((legs[a], legs[b]), (a, b) in relevant)
    return prior


@dataclass
class PriorStore:
    graph_hash: str
    tables: dict = field(default_factory=dict)  # month -> PriorTable
    config: dict = field(default_factory=dict)
    diagnostics: Counter = field(default_factory=Counter)

    def table(self, month: str) -> PriorTable:
        if month not in self.tables:
            self.tables[month] = PriorTable(month)
        return self.tables[month]

    def check_graph(self, ctx: RouteGraph) -> None:
        if self.graph_hash != ctx.content_hash:
            raise PriorGraphMismatch("prior/graph mismatch")


def build_prior(
    scenarios: Iterable[Scenario],
    ctx: RouteGraph,
    params: FilterParams = FilterParams(),
    config: Optional[dict] = None,
) -> PriorStore:
    store = PriorStore(ctx.content_hash, config=dict(config or {}))
    for sc in scenarios:
        accumulate_scenario(store.table(month_of(sc.time)), sc, ctx, params, store.diagnostics)
    return store


def select_prior(store, month: str) -> tuple[PriorTable, str]:
    """Exact month, else the same calendar month from the nearest year, else the nearest month."""
    tables = store.tables if isinstance(store, PriorStore) else store
    year, mon = parse_month(month)
    if not tables:
        raise PriorError("empty prior store")
    if month in tables:
        return tables[month], "exact"
    same = [m for m in tables if parse_month(m)[1] == mon]
    if same:
        best = min(same, key=lambda m: (abs(parse_month(m)[0] - year), m))
        return tables[best], f"same calendar month ({best})"
    q = year * 12 + mon - 1

    def dist(m):
        y, mm = parse_month(m)
        return abs(y * 12 + mm - 1 - q), m

    best = min(tables, key=dist)
    return tables[best], f"nearest month ({best})"


def prior_stats(store: PriorStore, ctx: Optional[RouteGraph] = None) -> dict:
    out = {"graph_hash": store.graph_hash, "months": {}}
    n_legs = len(ctx.leg_ids()) if ctx is not None else None
    for month, table in sorted(store.tables.items()):
        observed = sum(1 for c in table.counts.values() if c[0] > 0)
        entry = {
            "pairs_observed": observed,
            "cooccupancies": sum(c[0] for c in table.counts.values()),
            "relevant": sum(c[1] for c in table.counts.values()),
        }
        if n_legs:
            entry["coverage"] = observed / (n_legs * (n_legs + 1) / 2)
        out["months"][month] = entry
    return out


def save_prior(store: PriorStore, path) -> None:
    doc = {
        "format": PRIOR_FORMAT,
        "version": PRIOR_VERSION,
        "graph_hash": store.graph_hash,
        "config": store.config,
        "diagnostics": dict(store.diagnostics),
        "tables": [
            {"month": m, "counts": [[a, b, c[0], c[1]] for (a, b), c in sorted(t.counts.items())]}
            for m, t in sorted(store.tables.items())
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_prior(path, ctx: Optional[RouteGraph] = None) -> PriorStore:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != PRIOR_FORMAT or doc.get("version") != PRIOR_VERSION:
        raise PriorError(f"{path}: not a supported prior artifact")
    store = PriorStore(doc["graph_hash"], config=dict(doc.get("config") or {}),
                       diagnostics=Counter(doc.get("diagnostics") or {}))
    for t in doc["tables"]:
        table = PriorTable(t["month"])
        for a, b, n_co, n_rel in t["counts"]:
            if n_rel > n_co or n_rel < 0:
                raise PriorError(f"{path}: inconsistent counts for {a},{b}")
            table.counts[pair_key(a, b)] = [int(n_co), int(n_rel)]
        store.tables[t["month"]] = table
    if ctx is not None:
        store.check_graph(ctx)
    return store
