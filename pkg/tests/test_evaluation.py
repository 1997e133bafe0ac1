import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relpairs import synth
from relpairs.evaluation import (ConfusionMatrix, UndefinedStatistic, block_indices, classification_metrics,
                                 evaluate_filter, f_beta_score, moving_block_bootstrap_diff, spearman_rho,
                                 tune_filter)
from relpairs.relevance import HIGHLY_RELEVANT, NOT_RELEVANT, FilterParams, scenario_verdicts
from relpairs.traffic import Scenario

from oracles import spearman_oracle


def test_metric_examples():
    m = classification_metrics(ConfusionMatrix(10, 10, 10, 70))
    assert (m.precision, m.recall, m.f1) == (0.5, 0.5, 0.5)
    assert m.accuracy == pytest.approx(0.8)
    perfect = classification_metrics(ConfusionMatrix(5, 0, 0, 5))
    assert perfect.precision == perfect.recall == perfect.f1 == perfect.accuracy == perfect.f_beta == 1.0


def test_worked_metrics_arithmetic():
    assert f_beta_score(0.84, 0.84, 1.0) == pytest.approx(0.84, abs=1e-12)


@settings(max_examples=200)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_f_beta_one_is_f1(p, r):
    assert f_beta_score(p, r, 1.0) == pytest.approx(2 * p * r / (p + r), rel=1e-12)


def test_f_beta_weights_recall():
    # beta > 1 favours recall
    assert f_beta_score(0.5, 0.9, 1.5) > f_beta_score(0.9, 0.5, 1.5)


def test_undefined_ratios_and_empty_matrix():
    m = classification_metrics(ConfusionMatrix(0, 0, 0, 7))
    assert m.precision is None and m.recall is None and m.f1 is None and m.accuracy == 1.0
    with pytest.raises(ValueError):
        classification_metrics(ConfusionMatrix())
    with pytest.raises(ValueError):
        ConfusionMatrix(-1, 0, 0, 0)


def test_spearman_examples():
    x = np.linspace(0, 1, 20) ** 3
    assert spearman_rho(x, x) == 1.0
    assert spearman_rho(x, -x) == -1.0
    with pytest.raises(UndefinedStatistic):
        spearman_rho(x, np.ones_like(x))
    with pytest.raises(ValueError):
        spearman_rho([1, 2], [1, 2])


@pytest.mark.parametrize("seed", range(5))
def test_spearman_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=100)
    y = 0.5 * x + rng.normal(size=100)
    assert spearman_rho(x, y) == pytest.approx(spearman_oracle(x, y), abs=1e-12)
    # heavy ties
    xi, yi = rng.integers(0, 5, 100), rng.integers(0, 4, 100)
    assert spearman_rho(xi, yi) == pytest.approx(spearman_oracle(xi, yi), abs=1e-12)


def test_block_indices_shape():
    rng = np.random.default_rng(0)
    idx = block_indices(rng, 100, 15)
    assert len(idx) == 100 and idx.min() >= 0 and idx.max() < 100
    # each block is a run of consecutive indices
    assert np.all(np.diff(idx[:15]) == 1)


def test_bootstrap_identical_forecasts():
    rng = np.random.default_rng(1)
    obs = rng.normal(size=200)
    f = obs + rng.normal(size=200)
    r = moving_block_bootstrap_diff(obs, f, f, n=500)
    assert r.mean_diff == 0.0 and r.ci_low <= 0.0 <= r.ci_high
    assert r.p_value == 1.0


def test_bootstrap_detects_better_forecast():
    rng = np.random.default_rng(2)
    obs = np.cumsum(rng.normal(size=600))
    r = moving_block_bootstrap_diff(obs, obs, rng.normal(size=600), n=1000, seed=3)
    assert r.ci_low > 0 and r.p_value < 0.01


def test_bootstrap_reproducible_and_chunk_invariant():
    rng = np.random.default_rng(4)
    obs = np.cumsum(rng.normal(size=300))
    a = obs + rng.normal(scale=3, size=300)
    b = obs + rng.normal(scale=6, size=300)
    r1 = moving_block_bootstrap_diff(obs, a, b, n=700, seed=42)
    r2 = moving_block_bootstrap_diff(obs, a, b, n=700, seed=42)
    r3 = moving_block_bootstrap_diff(obs, a, b, n=700, seed=42, chunk=33)
    assert r1 == r2 == r3
    assert moving_block_bootstrap_diff(obs, a, b, n=700, seed=43) != r1


def test_bootstrap_discards_degenerate_replicates():
    obs = np.r_[np.zeros(40), np.arange(5.0)]
    f = np.arange(45.0)
    r = moving_block_bootstrap_diff(obs, f, f[::-1], block_len=5, n=300)
    assert r.discarded > 0 and r.n_samples + r.discarded == 300


def test_bootstrap_validation():
    with pytest.raises(ValueError):
        moving_block_bootstrap_diff([1, 2, 3], [1, 2, 3], [1, 2], n=10)
    with pytest.raises(ValueError):
        moving_block_bootstrap_diff(np.arange(10.0), np.arange(10.0), np.arange(10.0), block_len=10, n=10)


@pytest.fixture(scope="module")
def labelled():
    """Scenarios labelled by the filter itself at d_cpa = 12.5 NM."""
    spec = synth.crossing_flows_preset(seed=4, start="2025-05-14T09:00:00Z", duration_h=2.0)
    world = synth.generate_world(spec)
    truth_params = dataclasses.replace(FilterParams(), d_cpa=12.5)
    out = []
    for t in world.sample_times(10.0)[1:]:
        sc = world.scenario_at(t)
        if len(sc.flights) < 3:
            continue
        verdicts = {}
        for s, o, v in scenario_verdicts(sc, spec.sector, truth_params):
            verdicts.setdefault(s, {})[o] = HIGHLY_RELEVANT if v.relevant else NOT_RELEVANT
        for subject, labels in sorted(verdicts.items()):
            out.append(Scenario(sc.time, sc.flights, subject, labels))
    return spec.sector, truth_params, out


def test_tune_recovers_labelling_params(labelled):
    sector, truth, scenarios = labelled
    best, score, table = tune_filter(scenarios, sector, {"d_cpa": [5.0, 12.5, 20.0, 30.0]})
    assert score == 1.0 and best.d_cpa == truth.d_cpa
    assert len(table) == 4
    assert all(s < 1.0 for p, s, _ in table if p.d_cpa != truth.d_cpa)


def test_tune_single_point_and_empty_grid(labelled):
    sector, _, scenarios = labelled
    best, score, table = tune_filter(scenarios[:10], sector, {"delta_fl": [10.0]})
    assert best.delta_fl == 10.0 and len(table) == 1 and score == table[0][1]
    with pytest.raises(ValueError):
        tune_filter(scenarios, sector, {})
    with pytest.raises(ValueError):
        tune_filter(scenarios, sector, {"d_cpa": []})


def test_evaluate_filter_counts_every_label(labelled):
    sector, truth, scenarios = labelled
    m = evaluate_filter(scenarios, sector, truth)
    assert m.fp == m.fn == 0
    assert m.total == sum(len(s.labels) for s in scenarios)
