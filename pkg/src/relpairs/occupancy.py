"""Leg occupancy probabilities from Gaussian waypoint arrival times.

With arrival time ``T_i ~ N(mu_i, sigma^2)`` at node ``i`` and
``Phi_i(t) = P(T_i <= t)``, the probability mass at query time ``t`` is
``1 - Phi_0`` before the first node, ``Phi_{k-1} - Phi_k`` on leg ``k`` and
``Phi_{n-1}`` after the last node.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr

from . import geo
from .geo import GeoPoint
from .route_graph import MappedRoute, RouteNetwork

DEFAULT_SIGMA_MIN = 5.0


class TimingError(ValueError):
    pass


@dataclass
class ArrivalTimeline:
    callsign: str
    path: list[str]
    mu: np.ndarray  # POSIX seconds, one per path node
    legs: list[str]  # leg ids, one per consecutive node pair
    sigma_min: float = DEFAULT_SIGMA_MIN

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        if len(self.mu) != len(self.path) or len(self.path) < 2:
            raise TimingError("timeline needs one mean per node and at least two nodes")
        if len(self.legs) != len(self.path) - 1:
            raise TimingError("timeline needs one leg per consecutive node pair")
        if np.any(np.diff(self.mu) <= 0):
            raise TimingError("arrival means must be strictly increasing")
        if not self.sigma_min > 0:
            raise TimingError("sigma must be positive")

    @property
    def sigma_s(self) -> float:
        return self.sigma_min * 60.0


@dataclass
class OccupancyDistribution:
    callsign: str
    query_time: float
    pre_entry: float
    leg_ids: list[str]
    leg_probs: np.ndarray
    post_exit: float
    clamped: bool = False
    per_leg: dict = field(init=False)

    def __post_init__(self):
        self.per_leg = dict(zip(self.leg_ids, (float(p) for p in self.leg_probs)))

    def components(self) -> np.ndarray:
        return np.concatenate([[self.pre_entry], self.leg_probs, [self.post_exit]])


def occupancy_at(timeline: ArrivalTimeline, t: float) -> OccupancyDistribution:
    z = (float(t) - timeline.mu) / timeline.sigma_s
    cdf = ndtr(z)
    pre = float(ndtr(-z[0]))
    legs = cdf[:-1] - cdf[1:]
    post = float(cdf[-1])
    clamped = bool(np.any(legs < 0))
    if clamped:
        legs = np.clip(legs, 0.0, None)
        total = pre + legs.sum() + post
        pre, legs, post = pre / total, legs / total, post / total
    return OccupancyDistribution(timeline.callsign, float(t), pre, list(timeline.legs), legs, post, clamped)


def path_distances(network: RouteNetwork, path: Sequence[str]) -> np.ndarray:
    """Cumulative along-path distance (NM) at each node."""
    if len(path) < 2:
        return np.zeros(len(path))
    lat, lon = network.positions(path)
    seg = geo.np_haversine_nm(lat[:-1], lon[:-1], lat[1:], lon[1:])
    return np.concatenate([[0.0], np.cumsum(seg)])


def _foot_distance(network: RouteNetwork, path: Sequence[str], s: np.ndarray, pi: int, p: GeoPoint) -> float:
    """Along-path distance of ``p``'s nearest point on the legs either side of node ``pi``."""
    lo, hi = max(pi - 1, 0), min(pi + 1, len(path) - 1)
    frame = geo.LocalFrame(p)
    lat, lon = network.positions(path[lo:hi + 1])
    x, y = frame.project(lat, lon)
    d, u = geo.point_segment_distance(0.0, 0.0, x[:-1], y[:-1], x[1:], y[1:])
    k = int(np.argmin(d))
    seg = lo + k
    frac = float(u[k])
    if (seg == 0 and frac == 0.0) or (seg == len(path) - 2 and frac == 1.0):
        # beyond a path end: extend the end leg rather than clamp
        dx, dy = x[k + 1] - x[k], y[k + 1] - y[k]
        frac = float(-(x[k] * dx + y[k] * dy) / (dx * dx + dy * dy))
    return float(s[seg] + frac * (s[seg + 1] - s[seg]))


def interpolate_arrivals(
    callsign: str,
    waypoint_times: Sequence[float],
    mapped: MappedRoute,
    network: RouteNetwork,
    sigma_min: float = DEFAULT_SIGMA_MIN,
    waypoint_positions: Optional[Sequence[GeoPoint]] = None,
) -> ArrivalTimeline:
    """Arrival-time means for every node of a mapped path.

    ``waypoint_times`` holds the predicted time at each plan waypoint (indexed
    like the plan). Node times are linear in along-path distance between
    anchored waypoints and extrapolate at the adjacent leg's speed outside them.

    Clustering can move a waypoint's image node a few miles along the route.
    When ``waypoint_positions`` is given, each time is pinned to the
    waypoint's own foot point on the path instead of to its image node.
    """
    if len(mapped.path) < 2:
        raise TimingError("path has fewer than two nodes")
    if len(mapped.anchors) < 2:
        raise TimingError("need at least two timed waypoints on the path")
    s = path_distances(network, mapped.path)
    s_anchor = np.array([s[pi] for _, pi in mapped.anchors])
    if waypoint_positions is not None:
        feet = np.array([_foot_distance(network, mapped.path, s, pi, waypoint_positions[wi])
                         for wi, pi in mapped.anchors])
        if np.all(np.diff(feet) > 1e-9):
            s_anchor = feet
    t_anchor = np.array([float(waypoint_times[wi]) for wi, _ in mapped.anchors])
    ds = np.diff(s_anchor)
    dt = np.diff(t_anchor)
    if np.any(ds <= 1e-9):
        raise TimingError("degenerate timing")
    if np.any(dt <= 0):
        raise TimingError("non-increasing predicted times along the path")
    mu = np.interp(s, s_anchor, t_anchor)
    before = s < s_anchor[0]
    after = s > s_anchor[-1]
    if np.any(before):
        v = ds[0] / dt[0]
        mu[before] = t_anchor[0] - (s_anchor[0] - s[before]) / v
    if np.any(after):
        v = ds[-1] / dt[-1]
        mu[after] = t_anchor[-1] + (s[after] - s_anchor[-1]) / v
    legs = [network.leg_id(a, b) for a, b in zip(mapped.path, mapped.path[1:])]
    return ArrivalTimeline(callsign, list(mapped.path), mu, legs, sigma_min)
