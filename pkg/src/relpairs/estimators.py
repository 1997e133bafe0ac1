"""scikit-learn style wrappers around the filter and the forecaster.

The filter has no learned state, so ``fit`` only validates and records the
classes; wrapping it lets standard model-selection tools drive the threshold
search with the F-beta score.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import F_BETA, ConfusionMatrix, classification_metrics
from .forecast import AGGREGATE, PER_PAIR, forecast_series
from .ingest import FlightUpdateMessage
from .prior import build_prior
from .relevance import FilterParams, candidate_flights, is_relevant, label_truth
from .route_graph import build_route_graph
from .traffic import FlightBundle, Scenario, Sector


def check_pairs(X) -> list[tuple[FlightBundle, FlightBundle]]:
    """Validate a sequence of ``(subject, other)`` bundles taken at one time each."""
    if X is None or isinstance(X, (str, bytes)):
        raise ValueError("X must be a sequence of (subject, other) pairs")
    out = []
    for i, item in enumerate(X):
        if len(item) != 2 or not all(isinstance(f, FlightBundle) for f in item):
            raise ValueError(f"X[{i}] is not a (subject, other) pair of flights")
        s, o = item
        if s.callsign == o.callsign:
            raise ValueError(f"X[{i}] pairs a flight with itself")
        if abs(s.state.time - o.state.time) > 1e-6:
            raise ValueError(f"X[{i}] states are not simultaneous")
        out.append((s, o))
    if not out:
        raise ValueError("X is empty")
    return out


def check_labels(y, n: int) -> np.ndarray:
    arr = np.array([label_truth(v) for v in y], dtype=bool)
    if len(arr) != n:
        raise ValueError(f"got {len(arr)} labels for {n} samples")
    return arr


def pairs_from_scenarios(scenarios: Sequence[Scenario]):
    """Flatten labelled scenarios to ``(X, y)`` for :class:`RelevanceFilter`."""
    X, y = [], []
    for sc in scenarios:
        if sc.subject is None:
            raise ValueError("labelled scenario has no subject")
        flights = sc.by_callsign()
        for other, label in sorted(sc.labels.items()):
            if other == sc.subject:
                continue
            X.append((flights[sc.subject], flights[other]))
            y.append(label_truth(label))
    return X, np.array(y, dtype=bool)


class RelevanceFilter(ClassifierMixin, BaseEstimator):
    """Pairwise relevance classifier; ``score`` is F-beta rather than accuracy."""

    def __init__(self, sector: Optional[Sector] = None, delta_fl=10.0, d_current=80.0, delta_t=12.0, d_cpa=15.0,
                 in_trail_cone_total_angle=60.0, divergence_min_sep=5.0, beta=F_BETA):
        self.sector = sector
        self.delta_fl = delta_fl
        self.d_current = d_current
        self.delta_t = delta_t
        self.d_cpa = d_cpa
        self.in_trail_cone_total_angle = in_trail_cone_total_angle
        self.divergence_min_sep = divergence_min_sep
        self.beta = beta

    def _params(self) -> FilterParams:
        return FilterParams(self.delta_fl, self.d_current, self.delta_t, self.d_cpa,
                            self.in_trail_cone_total_angle, self.divergence_min_sep)

    def fit(self, X, y=None):
        pairs = check_pairs(X)
        self.params_ = self._params()
        self.classes_ = np.array([False, True])
        if y is not None:
            check_labels(y, len(pairs))
        return self

    def decide(self, X):
        """Full verdicts, reason codes included."""
        check_is_fitted(self, "params_")
        out = []
        for s, o in check_pairs(X):
            cands = None
            if self.sector is not None:
                cands = candidate_flights([s, o], self.sector, s.state.time, self.params_.delta_t, self.params_)
            out.append(is_relevant(s, o, self.sector, self.params_, None, cands))
        return out

    def predict(self, X) -> np.ndarray:
        return np.array([v.relevant for v in self.decide(X)], dtype=bool)

    def score(self, X, y, sample_weight=None) -> float:
        pred = self.predict(X)
        truth = check_labels(y, len(pred))
        m = classification_metrics(ConfusionMatrix.from_pairs(pred, truth), self.beta)
        return 0.0 if m.f_beta is None else m.f_beta


class ComplexityForecaster(BaseEstimator):
    """Route graph plus monthly prior, fitted from historic plans and snapshots.

    ``predict`` replays a message log to each emission time and returns the
    expected number of relevant pairs ``lookahead`` minutes later;
    ``transform`` also returns the traffic-count baseline.
    """

    def __init__(self, sector: Optional[Sector] = None, lookahead=45.0, sigma_min=5.0, mode=PER_PAIR,
                 merge_radius=2.5, filter_params: Optional[FilterParams] = None):
        self.sector = sector
        self.lookahead = lookahead
        self.sigma_min = sigma_min
        self.mode = mode
        self.merge_radius = merge_radius
        self.filter_params = filter_params

    def fit(self, X: Sequence[Scenario], y=None, plans=None):
        if self.sector is None:
            raise ValueError("a sector is required")
        if self.mode not in (PER_PAIR, AGGREGATE):
            raise ValueError(f"unknown mode {self.mode!r}")
        scenarios = list(X)
        if not scenarios:
            raise ValueError("no historic scenarios")
        if plans is None:
            seen = {}
            for sc in scenarios:
                for f in sc.flights:
                    if f.plan is not None:
                        seen.setdefault(f.callsign, f.plan)
            plans = list(seen.values())
        params = self.filter_params or FilterParams()
        self.graph_ = build_route_graph(plans, self.sector, merge_radius=self.merge_radius)
        self.prior_ = build_prior(scenarios, self.graph_, params)
        return self

    def _series(self, times, messages: Sequence[FlightUpdateMessage]):
        check_is_fitted(self, "prior_")
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or len(times) == 0:
            raise ValueError("times must be a non-empty one-dimensional sequence")
        if np.any(np.diff(times) < 0):
            raise ValueError("emission times must be non-decreasing")
        out = []
        for t in times:
            # one replay per emission keeps irregular time grids simple
            out.extend(forecast_series(messages, self.graph_, self.prior_, t, t, 60.0, (self.lookahead,),
                                       self.sigma_min, self.mode))
        return out

    def predict(self, times, messages) -> np.ndarray:
        return self.transform(times, messages)[:, 0]

    def transform(self, times, messages) -> np.ndarray:
        res = self._series(times, messages)
        return np.array([[r.expected_relevant_pairs, r.baseline_expected_traffic] for r in res])
