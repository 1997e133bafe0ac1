"""Filter classification metrics, grid tuning, and forecast comparison statistics."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .relevance import FilterParams, is_relevant, label_truth, candidate_flights
from .traffic import Scenario, Sector

F_BETA = 1.5


class UndefinedStatistic(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def from_pairs(cls, predicted: Iterable[bool], truth: Iterable[bool]) -> "ConfusionMatrix":
        tp = fp = fn = tn = 0
        for p, t in zip(predicted, truth):
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
        return cls(tp, fp, fn, tn)


@dataclass(frozen=True)
class Metrics:
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    accuracy: float
    f_beta: Optional[float]
    beta: float

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "f_beta": self.f_beta,
            "beta": self.beta,
        }


def f_beta_score(precision: Optional[float], recall: Optional[float], beta: float) -> Optional[float]:
    if precision is None or recall is None:
        return None
    den = beta * beta * precision + recall
    if den == 0:
        return None
    return (1 + beta * beta) * precision * recall / den


def classification_metrics(m: ConfusionMatrix, beta: float = F_BETA) -> Metrics:
    """Undefined ratios (zero denominators) are reported as ``None``."""
    if m.total == 0:
        raise ValueError("empty confusion matrix")
    precision = m.tp / (m.tp + m.fp) if m.tp + m.fp else None
    recall = m.tp / (m.tp + m.fn) if m.tp + m.fn else None
    return Metrics(
        precision=precision,
        recall=recall,
        f1=f_beta_score(precision, recall, 1.0),
        accuracy=(m.tp + m.tn) / m.total,
        f_beta=f_beta_score(precision, recall, beta),
        beta=beta,
    )


def labelled_judgments(scenario: Scenario, sector: Sector, params: FilterParams):
    """``(other, predicted, truth)`` for every labelled flight of a scenario's subject."""
    if scenario.subject is None:
        raise ValueError("labelled scenario has no subject")
    flights = scenario.by_callsign()
    subject = flights[scenario.subject]
    cache: dict = {}
    cands = candidate_flights(scenario.flights, sector, scenario.time, params.delta_t, params, cache)
    out = []
    for other in sorted(scenario.labels):
        if other == scenario.subject:
            continue
        if other not in flights:
            raise ValueError(f"label for unknown flight {other}")
        verdict = is_relevant(subject, flights[other], sector, params, cache, cands)
        out.append((other, verdict.relevant, label_truth(scenario.labels[other])))
    return out


def evaluate_filter(scenarios: Iterable[Scenario], sector: Sector, params: FilterParams) -> ConfusionMatrix:
    total = ConfusionMatrix()
    for sc in scenarios:
        js = labelled_judgments(sc, sector, params)
        total = total + ConfusionMatrix.from_pairs([p for _, p, _ in js], [t for _, _, t in js])
    return total


def tune_filter(
    scenarios: Sequence[Scenario],
    sector: Sector,
    grid: Mapping[str, Sequence[float]],
    base: FilterParams = FilterParams(),
    beta: float = F_BETA,
):
    """Exhaustive grid search maximising F-beta; ties go to higher recall, then smaller ``d_cpa``.

    Returns ``(best_params, best_score, table)`` where ``table`` lists every
    grid point with its score.
    """
    if not scenarios:
        raise ValueError("no labelled scenarios")
    keys = sorted(grid)
    if not keys or any(len(grid[k]) == 0 for k in keys):
        raise ValueError("empty parameter grid")
    table = []
    best = None
    for values in itertools.product(*(grid[k] for k in keys)):
        params = replace(base, **dict(zip(keys, values)))
        m = classification_metrics(evaluate_filter(scenarios, sector, params), beta)
        score = m.f_beta if m.f_beta is not None else 0.0
        recall = m.recall if m.recall is not None else 0.0
        table.append((params, score, m))
        rank = (score, recall, -params.d_cpa)
        if best is None or rank > best[0]:
            best = (rank, params, score)
    return best[1], best[2], table


# ---------------------------------------------------------------------------
# forecast comparison


def spearman_rho(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("series must be one-dimensional and equally long")
    if len(x) < 3:
        raise ValueError("need at least three points")
    rx = rankdata(x)
    ry = rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        raise UndefinedStatistic("spearman rho undefined for a constant series")
    return float(np.clip((rx @ ry) / den, -1.0, 1.0))


def _rank_corr_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ra = rankdata(a, axis=1)
    rb = rankdata(b, axis=1)
    ra -= ra.mean(axis=1, keepdims=True)
    rb -= rb.mean(axis=1, keepdims=True)
    den = np.sqrt(np.sum(ra * ra, axis=1) * np.sum(rb * rb, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, np.sum(ra * rb, axis=1) / np.where(den > 0, den, 1.0), np.nan)


@dataclass(frozen=True)
class BootstrapResult:
    mean_diff: float
    ci_low: float
    ci_high: float
    p_value: float
    n_samples: int
    block_len: int
    observed_diff: float
    rho_a: float
    rho_b: float
    discarded: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def block_indices(rng: np.random.Generator, length: int, block_len: int) -> np.ndarray:
    """Overlapping-block resample of ``range(length)``; the last block is truncated."""
    n_blocks = -(-length // block_len)
    starts = rng.integers(0, length - block_len + 1, size=n_blocks)
    idx = (starts[:, None] + np.arange(block_len)[None, :]).ravel()
    return idx[:length]


def moving_block_bootstrap_diff(
    observed,
    forecast_a,
    forecast_b,
    block_len: int = 15,
    n: int = 10_000,
    seed: int = 0,
    chunk: int = 1000,
) -> BootstrapResult:
    """Bootstrap distribution of ``rho(a, obs) - rho(b, obs)`` under moving-block resampling.

    Replicate ``i`` draws from its own generator spawned from ``seed``, so
    results do not depend on how replicates are batched. Replicates where a
    resampled series is constant are discarded.
    """
    obs = np.asarray(observed, dtype=float)
    fa = np.asarray(forecast_a, dtype=float)
    fb = np.asarray(forecast_b, dtype=float)
    if not (obs.shape == fa.shape == fb.shape) or obs.ndim != 1:
        raise ValueError("series must be one-dimensional and equally long")
    length = len(obs)
    if not 1 <= block_len < length:
        raise ValueError("block length must be positive and shorter than the series")
    rho_a = spearman_rho(fa, obs)
    rho_b = spearman_rho(fb, obs)
    children = np.random.SeedSequence(seed).spawn(n)
    diffs = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        idx = np.stack([block_indices(np.random.Generator(np.random.PCG64(c)), length, block_len)
                        for c in children[lo:hi]])
        o = obs[idx]
        diffs[lo:hi] = _rank_corr_rows(fa[idx], o) - _rank_corr_rows(fb[idx], o)
    valid = diffs[np.isfinite(diffs)]
    if len(valid) == 0:
        raise UndefinedStatistic("every bootstrap replicate was degenerate")
    m = len(valid)
    le = int(np.sum(valid <= 0))
    ge = int(np.sum(valid >= 0))
    p = min(1.0, 2.0 * min((le + 1) / (m + 1), (ge + 1) / (m + 1)))
    lo_q, hi_q = np.percentile(valid, [2.5, 97.5])
    mean = float(valid.mean())
    return BootstrapResult(
        mean_diff=mean,
        ci_low=float(lo_q),
        ci_high=float(hi_q),
        p_value=float(p),
        n_samples=m,
        block_len=block_len,
        observed_diff=rho_a - rho_b,
        rho_a=rho_a,
        rho_b=rho_b,
        discarded=n - m,
    )
