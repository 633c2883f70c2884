import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bgmoment.metrics import (
    DEFAULT_MAP_GRID,
    alignment_gap,
    average_precision,
    evaluate_predictions,
    mean_ap,
    rank_predictions,
    recall_at,
)
from bgmoment.verify import brute_force_ap

GT = np.array([0.2, 0.6])
HIT = [0.2, 0.6]
MISS = [0.7, 0.9]


def test_recall_examples():
    assert recall_at(1, 0.5, [np.array([HIT])], [GT]) == 1.0
    # IoU([0.2, 0.6], [0.2, 0.4]) = 0.5 / ... = 0.5; shrink to get 0.4
    low = np.array([[0.2, 0.36]])
    assert recall_at(1, 0.5, [low], [GT]) == 0.0
    assert recall_at(1, 0.5, [np.array([HIT]), np.array([MISS])], [GT, GT]) == 0.5


def test_average_precision_examples():
    assert average_precision(0.5, np.array([HIT, MISS]), [GT]) == 1.0
    assert average_precision(0.5, np.array([MISS]), [GT]) == 0.0
    assert average_precision(0.5, np.array([MISS, HIT, MISS]), [GT]) == pytest.approx(0.5)
    assert average_precision(0.5, np.array([HIT]), np.zeros((0, 2))) is None


def test_mean_ap_examples():
    per, avg = mean_ap([np.array([HIT])] * 3, [GT] * 3)
    assert all(v == 1.0 for v in per.values()) and avg == 1.0
    # hit at rank 2 with IoU 0.6: counts at 0.5, misses at 0.75
    partial = np.array([MISS, [0.2, 0.44]])
    per, avg = mean_ap([partial], [GT], (0.5, 0.75))
    assert per[0.5] == pytest.approx(0.5) and per[0.75] == 0.0
    assert avg == pytest.approx(0.25)
    assert len(DEFAULT_MAP_GRID) == 10 and DEFAULT_MAP_GRID[0] == 0.5 and DEFAULT_MAP_GRID[-1] == 0.95


def test_alignment_gap_examples():
    inside = [np.array([False, True, True, False])]
    assert alignment_gap([inside[0].astype(float)], inside) == (1.0, 0.0, 1.0)
    g, n, d = alignment_gap([np.full(4, 0.3)], inside)
    assert g == pytest.approx(0.3) and n == pytest.approx(0.3) and d == pytest.approx(0.0)


def test_gt_as_prediction_oracle_is_perfect():
    rng = np.random.default_rng(0)
    gts = [np.sort(rng.uniform(0, 1, 2)) for _ in range(20)]
    res = evaluate_predictions([g[None, :] for g in gts], gts)
    assert res.r1(0.7) == 1.0 and res.avg_map == 1.0


def test_rank_predictions_is_stable():
    spans = np.array([[0, 0.1], [0.2, 0.3], [0.4, 0.5]])
    np.testing.assert_array_equal(rank_predictions([0.5, 0.9, 0.5], spans), spans[[1, 0, 2]])


@st.composite
def ranked_case(draw):
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    k = draw(st.integers(1, 8))
    g = draw(st.integers(1, 3))
    gts = np.sort(rng.uniform(0, 1, (g, 2)), axis=1)
    preds = np.sort(rng.uniform(0, 1, (k, 2)), axis=1)
    hit = rng.random(k) < 0.4
    preds[hit] = gts[rng.integers(0, g, hit.sum())]
    return preds, gts


@settings(max_examples=150, deadline=None)
@given(ranked_case(), st.sampled_from([0.3, 0.5, 0.7]))
def test_average_precision_matches_brute_force(case, t):
    preds, gts = case
    assert average_precision(t, preds, gts) == pytest.approx(brute_force_ap(t, preds, gts), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(ranked_case(), min_size=1, max_size=6))
def test_recall_monotone(cases):
    ranked = [p for p, _ in cases]
    gts = [g[:1] for _, g in cases]
    for n in range(1, 8):
        for t in (0.3, 0.5, 0.7):
            assert recall_at(n, t, ranked, gts) <= recall_at(n + 1, t, ranked, gts)
            assert recall_at(n, t + 0.1, ranked, gts) <= recall_at(n, t, ranked, gts)
