"""Pairwise relevance filter.

Rules run cheapest first: candidate window, current distance, in-trail cone,
route divergence, vertical cones, then closest point of approach. A subject
is rolled out twice (last clearance and direct to its final in-sector fix)
and the pair is relevant if either rollout says so.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import geo, traffic
from .traffic import AircraftState, FlightBundle, PredictedTrajectory, Scenario, Sector


class Reason(str, enum.Enum):
    OUT_OF_SECTOR_WINDOW = "OUT_OF_SECTOR_WINDOW"
    TOO_FAR_CURRENT = "TOO_FAR_CURRENT"
    IN_TRAIL_EXCLUDED = "IN_TRAIL_EXCLUDED"
    DIVERGING_EXCLUDED = "DIVERGING_EXCLUDED"
    VERTICALLY_SEPARATED = "VERTICALLY_SEPARATED"
    CPA_EXCEEDED = "CPA_EXCEEDED"
    RELEVANT_VIA_CLEARANCE_PATH = "RELEVANT_VIA_CLEARANCE_PATH"
    RELEVANT_VIA_DIRECT_PATH = "RELEVANT_VIA_DIRECT_PATH"
    INTENT_FALLBACK = "INTENT_FALLBACK"


RELEVANT_CODES = frozenset({Reason.RELEVANT_VIA_CLEARANCE_PATH, Reason.RELEVANT_VIA_DIRECT_PATH})

DIVERGENCE_HYSTERESIS_NM = 0.1


@dataclass(frozen=True)
class FilterParams:
    """Filter thresholds. Distances in NM, levels in FL, ``delta_t`` in minutes."""

    delta_fl: float = 10.0
    d_current: float = 80.0
    delta_t: float = 12.0
    d_cpa: float = 15.0
    in_trail_cone_total_angle: float = 60.0
    divergence_min_sep: float = 5.0
    sigma_rocd_fraction: float = traffic.SIGMA_ROCD_FRACTION
    step_s: float = traffic.STEP_S

    def __post_init__(self):
        for name in ("delta_fl", "d_current", "delta_t", "d_cpa", "in_trail_cone_total_angle",
                     "divergence_min_sep", "step_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"FilterParams.{name} must be strictly positive")
        if self.delta_t > 60:
            raise ValueError("FilterParams.delta_t must not exceed 60 minutes")
        if self.sigma_rocd_fraction < 0:
            raise ValueError("FilterParams.sigma_rocd_fraction must be non-negative")

    @property
    def horizon_s(self) -> float:
        return self.delta_t * 60.0


@dataclass(frozen=True)
class RelevanceVerdict:
    relevant: bool
    reasons: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.relevant != bool(self.reasons & RELEVANT_CODES):
            raise ValueError("verdict relevance must match its reason codes")

    def to_json(self) -> dict:
        return {"relevant": self.relevant, "reasons": sorted(r.value for r in self.reasons)}


def _shared(traj_a: PredictedTrajectory, traj_b: PredictedTrajectory, until: Optional[float] = None):
    ta = np.round(traj_a.times, 3)
    tb = np.round(traj_b.times, 3)
    common, ia, ib = np.intersect1d(ta, tb, assume_unique=True, return_indices=True)
    if until is not None:
        keep = common <= until + 1e-6
        common, ia, ib = common[keep], ia[keep], ib[keep]
    return common, ia, ib


def separation_series(traj_a: PredictedTrajectory, traj_b: PredictedTrajectory, until: Optional[float] = None):
    common, ia, ib = _shared(traj_a, traj_b, until)
    if len(common) == 0:
        raise geo.GeometryError("no temporal overlap")
    d = geo.np_haversine_nm(traj_a.lat[ia], traj_a.lon[ia], traj_b.lat[ib], traj_b.lon[ib])
    return common, d


def cpa(traj_a: PredictedTrajectory, traj_b: PredictedTrajectory, until: Optional[float] = None):
    """``(d_min, t_at_min)`` over the shared samples, earliest time on ties."""
    common, d = separation_series(traj_a, traj_b, until)
    i = int(np.argmin(d))
    return float(d[i]), float(common[i])


def candidate_flights(
    flights: Sequence[FlightBundle],
    sector: Sector,
    now: float,
    delta_t: float = 12.0,
    params: Optional[FilterParams] = None,
    rollouts: Optional[dict] = None,
) -> set[str]:
    """Flights inside the sector volume now, or predicted to enter it within ``delta_t`` minutes."""
    params = params or FilterParams()
    out = set()
    for f in flights:
        s = f.state
        if sector.contains(s.position.lat, s.position.lon, s.current_fl)[0]:
            out.add(f.callsign)
            continue
        traj = _rollout(f, params, rollouts)
        keep = traj.times <= now + delta_t * 60.0 + 1e-6
        if np.any(sector.contains(traj.lat[keep], traj.lon[keep], traj.fl_nominal[keep])):
            out.add(f.callsign)
    return out


def in_trail_excluded(subject: AircraftState, other: AircraftState, params: FilterParams = FilterParams()) -> bool:
    """True when ``other`` sits in the rear cone of ``subject`` and is not faster."""
    if geo.great_circle_nm(subject.position, other.position) < 1e-9:
        return False
    brg = geo.initial_bearing_deg(subject.position, other.position)
    off = abs(float(geo.angle_diff_deg(brg, subject.track + 180.0)))
    return off <= params.in_trail_cone_total_angle / 2.0 + 1e-9 and other.ground_speed <= subject.ground_speed


def diverging_excluded(traj_subject, traj_other, params: FilterParams = FilterParams()) -> bool:
    """True when separation never shrinks (0.1 NM hysteresis) and stays at or above the floor."""
    _, d = separation_series(traj_subject, traj_other)
    if d.min() < params.divergence_min_sep:
        return False
    running = np.maximum.accumulate(d)
    return bool(np.all(d >= running - DIVERGENCE_HYSTERESIS_NM))


def vertical_overlap(cone_subject, cone_other, params: FilterParams = FilterParams(), until=None) -> bool:
    """Whether the buffered subject band meets the other band at any shared sample up to ``until``."""
    common, ia, ib = _shared(cone_subject, cone_other, until)
    if len(common) == 0:
        return False
    lo_s = cone_subject.fl_lower[ia] - params.delta_fl
    hi_s = cone_subject.fl_upper[ia] + params.delta_fl
    lo_o = cone_other.fl_lower[ib]
    hi_o = cone_other.fl_upper[ib]
    return bool(np.any((lo_s <= hi_o) & (lo_o <= hi_s)))


def _rollout(f: FlightBundle, params: FilterParams, cache: Optional[dict]) -> PredictedTrajectory:
    key = ("other", f.callsign)
    if cache is not None and key in cache:
        return cache[key]
    traj = traffic.predict(f.state, f.plan, f.clearance, params.horizon_s, params.step_s, params.sigma_rocd_fraction)
    if cache is not None:
        cache[key] = traj
    return traj


def _subject_rollouts(f: FlightBundle, sector: Sector, params: FilterParams, cache: Optional[dict]):
    key = ("subject", f.callsign)
    if cache is not None and key in cache:
        return cache[key]
    pair = traffic.subject_trajectories(
        f.state, f.plan, f.clearance, sector, params.horizon_s, params.step_s, params.sigma_rocd_fraction
    )
    if cache is not None:
        cache[key] = pair
        cache.setdefault(("other", f.callsign), pair[0])
    return pair


def _path_verdict(traj_s, traj_o, params: FilterParams, now: float) -> Reason:
    if diverging_excluded(traj_s, traj_o, params):
        return Reason.DIVERGING_EXCLUDED
    d_min, t_min = cpa(traj_s, traj_o, until=now + params.horizon_s)
    if not vertical_overlap(traj_s, traj_o, params, until=t_min):
        return Reason.VERTICALLY_SEPARATED
    if d_min <= params.d_cpa:
        return Reason.RELEVANT_VIA_CLEARANCE_PATH
    return Reason.CPA_EXCEEDED


def is_relevant(
    subject: FlightBundle,
    other: FlightBundle,
    sector: Optional[Sector],
    params: FilterParams = FilterParams(),
    cache: Optional[dict] = None,
    candidates: Optional[set] = None,
) -> RelevanceVerdict:
    """Relevance of ``other`` to ``subject``, with the full reason trace."""
    reasons: set = set()
    now = subject.state.time
    if subject.plan is None:
        reasons.add(Reason.INTENT_FALLBACK)
    if other.plan is None:
        reasons.add(Reason.INTENT_FALLBACK)
    if sector is not None:
        if candidates is None:
            candidates = candidate_flights([subject, other], sector, now, params.delta_t, params, cache)
        if subject.callsign not in candidates or other.callsign not in candidates:
            reasons.add(Reason.OUT_OF_SECTOR_WINDOW)
            return RelevanceVerdict(False, frozenset(reasons))
    if geo.great_circle_nm(subject.state.position, other.state.position) > params.d_current:
        reasons.add(Reason.TOO_FAR_CURRENT)
        return RelevanceVerdict(False, frozenset(reasons))
    # in-trail is a property of the pair, whichever aircraft is the subject
    if in_trail_excluded(subject.state, other.state, params) or in_trail_excluded(other.state, subject.state, params):
        reasons.add(Reason.IN_TRAIL_EXCLUDED)
        return RelevanceVerdict(False, frozenset(reasons))
    if sector is not None:
        paths = _subject_rollouts(subject, sector, params, cache)
    else:
        one = _rollout(subject, params, cache)
        paths = (one, one)
    traj_o = _rollout(other, params, cache)
    first = _path_verdict(paths[0], traj_o, params, now)
    reasons.add(first)
    if paths[1] is not paths[0]:
        second = _path_verdict(paths[1], traj_o, params, now)
        if second is Reason.RELEVANT_VIA_CLEARANCE_PATH:
            second = Reason.RELEVANT_VIA_DIRECT_PATH
        reasons.add(second)
    relevant = bool(reasons & RELEVANT_CODES)
    return RelevanceVerdict(relevant, frozenset(reasons))


def pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def scenario_verdicts(
    scenario: Scenario,
    sector: Sector,
    params: FilterParams = FilterParams(),
    subjects: Optional[Iterable[str]] = None,
    cache: Optional[dict] = None,
):
    """Yield ``(subject, other, verdict)`` for each candidate subject against every other flight."""
    cache = {} if cache is None else cache
    flights = scenario.by_callsign()
    cands = candidate_flights(scenario.flights, sector, scenario.time, params.delta_t, params, cache)
    order = sorted(flights)
    subjects = order if subjects is None else list(subjects)
    for s in subjects:
        for o in order:
            if o == s:
                continue
            yield s, o, is_relevant(flights[s], flights[o], sector, params, cache, cands)


def scenario_relevant_pairs(
    scenario: Scenario,
    sector: Sector,
    params: FilterParams = FilterParams(),
    cache: Optional[dict] = None,
) -> set[tuple[str, str]]:
    """Unordered pairs relevant with either member as subject."""
    cache = {} if cache is None else cache
    flights = scenario.by_callsign()
    cands = sorted(candidate_flights(scenario.flights, sector, scenario.time, params.delta_t, params, cache))
    if len(cands) < 2:
        return set()
    lat = np.array([flights[c].state.position.lat for c in cands])
    lon = np.array([flights[c].state.position.lon for c in cands])
    dist = geo.np_haversine_nm(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    out = set()
    for i, j in itertools.combinations(range(len(cands)), 2):
        if dist[i, j] > params.d_current:
            continue
        a, b = cands[i], cands[j]
        if is_relevant(flights[a], flights[b], sector, params, cache, set(cands)).relevant or is_relevant(
            flights[b], flights[a], sector, params, cache, set(cands)
        ).relevant:
            out.add(pair_key(a, b))
    return out


# ---------------------------------------------------------------------------
# controller labels

HIGHLY_RELEVANT = "highly_relevant"
SOME_RELEVANCY = "some_relevancy"
NOT_RELEVANT = "not_relevant"
LABELS = (HIGHLY_RELEVANT, SOME_RELEVANCY, NOT_RELEVANT)


def consolidate_label(proposed: bool, responses: Sequence[str]) -> bool:
    """Truth label from the filter proposal and controller corrections.

    A single major response, or two minor ones, flips the proposal.
    """
    for r in responses:
        if r not in LABELS:
            raise ValueError(f"unknown survey response {r!r}")
    minor = sum(r == SOME_RELEVANCY for r in responses)
    if proposed:
        flip = any(r == NOT_RELEVANT for r in responses) or minor >= 2
    else:
        flip = any(r == HIGHLY_RELEVANT for r in responses) or minor >= 2
    return (not proposed) if flip else proposed


def label_truth(label) -> bool:
    if isinstance(label, (bool, np.bool_)):
        return bool(label)
    if isinstance(label, str):
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
        return label != NOT_RELEVANT
    if isinstance(label, dict):
        return consolidate_label(bool(label["proposed"]), label.get("responses", []))
    raise ValueError(f"unsupported label record {label!r}")
