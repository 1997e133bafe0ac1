"""Expected number of relevant aircraft pairs at a future query time.

For every unordered pair of flights ``(a, b)`` the contribution is
``sum_i sum_j P_a(leg i) P_b(leg j) E[relevant | i, j]`` over the legs of each
flight's own path; the forecast is the sum over pairs. The ``aggregate`` mode
instead pools occupancy over all flights before the double sum.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .ingest import FlightStore, FlightUpdateMessage
from .occupancy import ArrivalTimeline, occupancy_at
from .prior import PriorStore, PriorTable, select_prior
from .route_graph import RouteGraph
from .timeutil import format_time, month_of

log = logging.getLogger(__name__)

PER_PAIR = "per_pair"
AGGREGATE = "aggregate"
EXITED_MASS = 0.999
CSV_COLUMNS = ["emission_time", "lookahead_min", "expected_relevant_pairs", "baseline_traffic", "flights_considered"]


class ForecastError(ValueError):
    pass


@dataclass(frozen=True)
class ForecastQuery:
    now: float
    lookahead: float = 45.0  # minutes

    def __post_init__(self):
        if not 1.0 <= self.lookahead <= 120.0:
            raise ForecastError("lookahead must be within [1, 120] minutes")

    @property
    def query_time(self) -> float:
        return self.now + self.lookahead * 60.0


@dataclass
class ForecastResult:
    query: ForecastQuery
    expected_relevant_pairs: float
    baseline_expected_traffic: float
    per_pair_contributions: dict = field(default_factory=dict)
    flights_considered: int = 0
    coverage_warning: bool = False

    def row(self) -> list:
        return [
            format_time(self.query.now),
            f"{self.query.lookahead:g}",
            f"{self.expected_relevant_pairs:.9g}",
            f"{self.baseline_expected_traffic:.9g}",
            self.flights_considered,
        ]


def _occupancies(timelines: Mapping[str, ArrivalTimeline], t: float):
    return [(cs, occupancy_at(timelines[cs], t)) for cs in sorted(timelines)]


def baseline_traffic(timelines: Mapping[str, ArrivalTimeline], ctx: RouteGraph, query: ForecastQuery) -> float:
    """Expected number of aircraft on in-sector legs at the query time."""
    inside = _in_sector_cache(ctx)
    total = 0.0
    for _, occ in _occupancies(timelines, query.query_time):
        total += sum(p for lid, p in zip(occ.leg_ids, occ.leg_probs) if lid in inside)
    return float(total)


def _in_sector_cache(ctx: RouteGraph) -> set:
    cached = getattr(ctx, "_in_sector_legs", None)
    if cached is None:
        cached = ctx.in_sector_legs()
        ctx._in_sector_legs = cached
    return cached


def forecast(
    timelines: Mapping[str, ArrivalTimeline],
    ctx: RouteGraph,
    prior: PriorTable,
    query: ForecastQuery,
    mode: str = PER_PAIR,
) -> ForecastResult:
    if mode not in (PER_PAIR, AGGREGATE):
        raise ForecastError(f"unknown forecast mode {mode!r}")
    if not timelines:
        return ForecastResult(query, 0.0, 0.0, {}, 0)
    index = ctx.leg_index
    expect = prior.expectation_matrix(index)
    inside = _in_sector_cache(ctx)
    baseline = 0.0
    kept = []
    for cs, occ in _occupancies(timelines, query.query_time):
        baseline += sum(p for lid, p in zip(occ.leg_ids, occ.leg_probs) if lid in inside)
        if occ.post_exit > EXITED_MASS:
            continue
        idx = np.array([index[lid] for lid in occ.leg_ids], dtype=int)
        kept.append((cs, idx, occ.leg_probs))
    contributions: dict = {}
    # fixed pair order keeps the floating-point sum bit-stable
    for (ca, ia, pa), (cb, ib, pb) in itertools.combinations(kept, 2):
        c = float(pa @ expect[np.ix_(ia, ib)] @ pb)
        contributions[(ca, cb)] = 2.0 * c if mode == AGGREGATE else c
    if mode == AGGREGATE:
        for ca, ia, pa in kept:
            contributions[(ca, ca)] = float(pa @ expect[np.ix_(ia, ia)] @ pa)
    total = float(sum(contributions.values()))
    return ForecastResult(query, total, float(baseline), contributions, len(kept))


def _prior_for(prior, t: float) -> PriorTable:
    if isinstance(prior, PriorTable):
        return prior
    table, _ = select_prior(prior, month_of(t))
    return table


def forecast_series(
    messages: Sequence[FlightUpdateMessage],
    ctx: RouteGraph,
    prior,
    start: float,
    end: float,
    step_s: float = 60.0,
    lookaheads: Sequence[float] = (30.0, 45.0),
    sigma_min: float = 5.0,
    mode: str = PER_PAIR,
    ttl_min: float = 90.0,
) -> list[ForecastResult]:
    """Replay the message log to every emission time and forecast each lookahead."""
    if isinstance(prior, PriorStore):
        prior.check_graph(ctx)
    ordered = sorted(messages, key=lambda m: (m.msg_time, m.to_line()))
    store = FlightStore(ctx, sigma_min)
    first = ordered[0].msg_time if ordered else None
    results = []
    uncovered = 0
    cursor = 0
    n_steps = int(np.floor((end - start) / step_s + 1e-9))
    for k in range(n_steps + 1):
        now = start + k * step_s
        while cursor < len(ordered) and ordered[cursor].msg_time <= now:
            store.apply(ordered[cursor])
            cursor += 1
        store.expire(now, ttl_min)
        warn = first is None or now < first
        uncovered += warn
        snap = store.snapshot()
        for la in lookaheads:
            q = ForecastQuery(now, la)
            res = forecast(snap, ctx, _prior_for(prior, q.query_time), q, mode)
            res.coverage_warning = warn
            results.append(res)
    if uncovered:
        log.warning("%d emission times precede the message log coverage", uncovered)
    return results


def write_forecast_csv(results: Iterable[ForecastResult], fh, config: Optional[dict] = None) -> None:
    if config is not None:
        fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        w.writerow(r.row())


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
