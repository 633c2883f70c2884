import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from bgmoment.errors import ContractError, DomainError, EligibilityError
from bgmoment.temporal import (
    FrameTimeline,
    Span,
    center_width,
    cw_to_se,
    from_center_width,
    giou,
    giou_matrix,
    iou,
    iou_matrix,
    remap_span,
    se_to_cw,
    shift_probability_gate,
    temporal_shift,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def spans(draw):
    a, b = sorted((draw(unit), draw(unit)))
    return Span(a, b)


def test_iou_examples():
    assert iou(Span(0.2, 0.6), Span(0.2, 0.6)) == 1.0
    assert iou(Span(0.0, 0.2), Span(0.5, 0.9)) == 0.0
    assert iou(Span(0.0, 0.5), Span(0.25, 0.75)) == pytest.approx(1 / 3, abs=1e-12)


def test_giou_examples():
    assert giou(Span(0.1, 0.4), Span(0.1, 0.4)) == 1.0
    s = lambda a, b: Span(a, b, "seconds")  # noqa: E731
    assert giou(s(0, 1), s(2, 3)) == pytest.approx(-1 / 3, abs=1e-12)
    assert giou(s(0, 1), s(1, 2)) == pytest.approx(0.0, abs=1e-12)


def test_giou_of_two_points_is_undefined():
    with pytest.raises(DomainError):
        giou(Span(0.3, 0.3), Span(0.5, 0.5))


def test_mixed_units_rejected():
    with pytest.raises(ContractError):
        iou(Span(0.0, 0.5), Span(0.0, 5.0, "seconds"))


def test_span_validation():
    with pytest.raises(ContractError):
        Span(0.6, 0.2)
    with pytest.raises(ContractError):
        Span(-0.1, 0.5)


def test_center_width_examples():
    assert center_width(Span(0.0, 1.0)) == (0.5, 1.0)
    assert from_center_width(0.5, 0.0) == Span(0.5, 0.5)
    c, w = center_width(Span(0.2, 0.6))
    assert (c, w) == pytest.approx((0.4, 0.4))


@settings(max_examples=200, deadline=None)
@given(spans(), spans())
def test_iou_and_giou_properties(a, b):
    assume(a.length > 0 or b.length > 0)
    v, g = iou(a, b), giou(a, b)
    assert 0.0 <= v <= 1.0
    assert g <= v + 1e-12
    assert -1.0 <= g <= 1.0 + 1e-12
    # the bound is strict mathematically; it only rounds to -1 when union/enclosure underflows
    union = a.length + b.length - max(0.0, min(a.end, b.end) - max(a.start, b.start))
    if union > 1e-9 * (max(a.end, b.end) - min(a.start, b.start)):
        assert g > -1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    assert g == pytest.approx(giou(b, a), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(spans(), spans())
def test_matrix_forms_agree_with_scalars(a, b):
    assume(a.length > 1e-9 or b.length > 1e-9)
    A, B = np.array([[a.start, a.end]]), np.array([[b.start, b.end]])
    assert iou_matrix(A, B)[0, 0] == pytest.approx(iou(a, b), abs=1e-12)
    assert giou_matrix(A, B)[0, 0] == pytest.approx(giou(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_center_width_round_trip(c, w):
    se = cw_to_se(np.array([c, w]))
    np.testing.assert_allclose(se_to_cw(se), [c, w], atol=1e-12)


def test_shift_worked_example():
    order, new = temporal_shift(FrameTimeline(10, 1.0), Span(5.0, 8.0, "seconds"), np.random.default_rng(0), new_start=7)
    assert (new.start, new.end) == (7.0, 10.0)
    np.testing.assert_array_equal(order, [0, 1, 2, 3, 4, 8, 9, 5, 6, 7])


def test_shift_to_original_start_is_identity():
    order, new = temporal_shift(FrameTimeline(10, 1.0), Span(3.0, 6.0, "seconds"), np.random.default_rng(0), new_start=3)
    np.testing.assert_array_equal(order, np.arange(10))
    assert (new.start, new.end) == (3.0, 6.0)


def test_shift_block_move_by_hand():
    order, new = temporal_shift(FrameTimeline(6, 1.0), Span(2.0, 4.0, "seconds"), np.random.default_rng(0), new_start=0)
    np.testing.assert_array_equal(order, [2, 3, 0, 1, 4, 5])
    assert (new.start, new.end) == (0.0, 2.0)


def test_shift_rejects_long_video():
    with pytest.raises(EligibilityError):
        temporal_shift(FrameTimeline(100, 1.0), Span(5.0, 8.0, "seconds"), np.random.default_rng(0))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.data())
def test_shift_invariants(L, data):
    first = data.draw(st.integers(0, L - 1))
    stop = data.draw(st.integers(first + 1, L))
    assume(stop - first < L)
    seed = data.draw(st.integers(0, 2**31))
    tl = FrameTimeline(L, 1.0)
    order, new = temporal_shift(tl, Span(float(first), float(stop), "seconds"), np.random.default_rng(seed))
    assert sorted(order.tolist()) == list(range(L))
    assert new.length == stop - first
    s = int(new.start)
    np.testing.assert_array_equal(order[s : s + stop - first], np.arange(first, stop))
    rest = np.concatenate([order[:s], order[s + stop - first :]])
    assert np.all(np.diff(rest) > 0)
    again, _ = temporal_shift(tl, Span(float(first), float(stop), "seconds"), np.random.default_rng(seed))
    np.testing.assert_array_equal(order, again)


def test_remap_span_follows_permutation():
    tl = FrameTimeline(6, 1.0)
    order = np.array([2, 3, 0, 1, 4, 5])
    assert remap_span(Span(4.0, 6.0, "seconds"), order, tl) == Span(4.0, 6.0, "seconds")
    assert remap_span(Span(0.0, 2.0, "seconds"), order, tl) == Span(2.0, 4.0, "seconds")
    assert remap_span(Span(1.0, 3.0, "seconds"), order, tl) is None


def test_shift_gate_examples():
    rng = np.random.default_rng(0)
    assert not any(shift_probability_gate(287.0, 1.0, rng) for _ in range(20))
    assert not shift_probability_gate(30.0, 0.0, rng)
    assert shift_probability_gate(30.0, 1.0, rng)
    with pytest.raises(ContractError):
        shift_probability_gate(30.0, 1.5, rng)
