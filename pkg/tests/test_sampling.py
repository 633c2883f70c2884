import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bgmoment.errors import ContractError
from bgmoment.sampling import NegativeSamplerConfig, QueryRecord, cosine_similarity, eligible_negatives, select_negative
from bgmoment.temporal import Span, iou


def rec(qid, start, end, sent, vid="v"):
    return QueryRecord(qid, vid, Span(start, end), np.ones((2, 3)), np.asarray(sent, dtype=float))


def test_cosine_examples():
    assert cosine_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / np.sqrt(2))


def test_empty_pool_gives_none():
    assert select_negative(rec("t", 0, 0.2, [1, 0]), [], NegativeSamplerConfig(), np.random.default_rng(0)) is None


def test_single_eligible_candidate():
    target = rec("t", 0.0, 0.2, [1, 0])
    other = rec("a", 0.5, 0.8, [0, 1])
    assert select_negative(target, [other], NegativeSamplerConfig(), np.random.default_rng(0)) is other


def test_iou_filter_by_hand():
    target = rec("t", 0.0, 0.5, [1.0, 0.0])
    # IoU 0.6 with the target, then IoU 0.1
    near = rec("near", 0.0, 0.3, [0.1, 1.0])
    far = rec("far", 0.45, 0.5, [0.1, 1.0])
    assert iou(near.span, target.span) == pytest.approx(0.6)
    assert iou(far.span, target.span) == pytest.approx(0.1)
    rng = np.random.default_rng(0)
    picks = {select_negative(target, [near, far], NegativeSamplerConfig(0.5, 0.5), rng).qid for _ in range(50)}
    assert picks == {"far"}


def test_similarity_filter():
    target = rec("t", 0.0, 0.2, [1.0, 0.0])
    twin = rec("twin", 0.6, 0.8, [0.99, 0.05])
    assert select_negative(target, [twin], NegativeSamplerConfig(), np.random.default_rng(0)) is None


def test_unfiltered_admits_everything():
    target = rec("t", 0.0, 0.5, [1.0, 0.0])
    pool = [rec("same", 0.0, 0.5, [1.0, 0.0]), rec("x", 0.6, 0.9, [0.0, 1.0])]
    assert len(eligible_negatives(target, pool, NegativeSamplerConfig.unfiltered())) == 2


def test_pool_contract_violations():
    target = rec("t", 0.0, 0.2, [1, 0])
    with pytest.raises(ContractError):
        eligible_negatives(target, [rec("o", 0.5, 0.6, [0, 1], vid="w")], NegativeSamplerConfig())
    with pytest.raises(ContractError):
        eligible_negatives(target, [target], NegativeSamplerConfig())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.floats(-1.0, 1.0))
def test_selected_negative_satisfies_thresholds(seed, t_iou, t_sim):
    rng = np.random.default_rng(seed)
    pool = []
    for i in range(5):
        a, b = np.sort(rng.uniform(0, 1, 2))
        pool.append(rec(f"q{i}", a, b, rng.normal(size=3)))
    target = rec("t", 0.2, 0.5, rng.normal(size=3))
    cfg = NegativeSamplerConfig(t_iou, t_sim)
    neg = select_negative(target, pool, cfg, rng)
    if neg is not None:
        assert iou(neg.span, target.span) < t_iou or t_iou >= 1.0
        assert cosine_similarity(neg.sentence_embedding, target.sentence_embedding) < t_sim
