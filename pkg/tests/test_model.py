import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bgmoment import autodiff as ad
from bgmoment.autodiff import Tensor
from bgmoment.errors import ContractError, DomainError, ShapeError
from bgmoment.model import (
    FrameMatcher,
    ModelConfig,
    MomentDetector,
    apply_attention,
    attentive_pool,
    frame_attention,
    joint_probability,
    semantic_score,
)
from bgmoment.nn import sine_embed

from conftest import tiny_model_config

probs = arrays(np.float64, (2, 7), elements=st.floats(0.0, 1.0))


def _zero(module):
    for p in module.parameters():
        p.data[...] = 0.0


def _inputs(rng, b=2, lv=8, lw=5, dv=8, dt=6):
    return (
        rng.normal(size=(b, lv, dv)), np.ones((b, lv), dtype=bool),
        rng.normal(size=(b, lw, dt)), np.ones((b, lw), dtype=bool),
    )


def test_projection_shapes():
    model = MomentDetector(ModelConfig(d_video=500, d_text=300, d_model=256, encoder_layers=1, decoder_layers=1))
    rng = np.random.default_rng(0)
    V, Q = model.project_inputs(rng.normal(size=(1, 8, 500)), rng.normal(size=(1, 5, 300)))
    assert V.shape == (1, 8, 256) and Q.shape == (1, 5, 256)


def test_projection_with_zero_weights_returns_final_bias():
    model = MomentDetector(tiny_model_config())
    _zero(model.video_proj)
    model.video_proj.mlp.layers[-1].bias.data[...] = np.arange(16.0)
    V = model.video_proj(np.random.default_rng(0).normal(size=(1, 3, 8)))
    np.testing.assert_array_equal(V.data, np.broadcast_to(np.arange(16.0), (1, 3, 16)))


def test_projection_is_scale_invariant():
    model = MomentDetector(tiny_model_config())
    x = np.random.default_rng(1).normal(size=(1, 2, 8))
    np.testing.assert_allclose(model.video_proj(x * 10.0).data, model.video_proj(x).data, atol=1e-12)


def test_encoder_shape_and_determinism():
    model = MomentDetector(tiny_model_config(dropout=0.1)).eval()
    rng = np.random.default_rng(2)
    video, vm, text, tm = _inputs(rng)
    V, Q = model.project_inputs(video, text)
    a = model.encode(V, Q, vm, tm)
    b = model.encode(V, Q, vm, tm)
    assert a.X.shape == (2, 13, 16)
    np.testing.assert_array_equal(a.X.data, b.X.data)


def test_encoder_with_silenced_attention_is_per_row_feedforward():
    model = MomentDetector(tiny_model_config()).eval()
    layer = model.encoder_layers[0]
    _zero(layer.attn.v_proj)
    _zero(layer.attn.out_proj)
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(1, 4, 16)))
    got = layer(x, np.ones((1, 4), dtype=bool)).data
    h = layer.norm1(x)
    expected = layer.norm2(h + layer.ff(h)).data
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_pfm_examples():
    m = FrameMatcher(2, np.random.default_rng(0))
    _zero(m)
    np.testing.assert_array_equal(m(Tensor(np.ones((3, 2)))).data, 0.5)
    m.fc1.weight.data[...] = [[1.0], [0.0]]
    m.fc2.weight.data[...] = [[1.0]]
    got = m(Tensor(np.array([[1.0, 0.0]]))).data[0]
    assert got == pytest.approx(1.0 / (1.0 + np.exp(-np.tanh(1.0))), abs=1e-12)
    assert got == pytest.approx(0.6817, abs=1e-4)
    m.fc1.weight.data[...] = [[50.0], [0.0]]
    m.fc2.weight.data[...] = [[50.0]]
    assert m(Tensor(np.array([[1.0, 0.0]]))).data[0] == pytest.approx(1.0, abs=1e-12)


def test_joint_probability_examples():
    p = Tensor(np.array([0.9, 0.3]))
    np.testing.assert_array_equal(joint_probability(p, Tensor(np.zeros(2))).data, p.data)
    np.testing.assert_array_equal(joint_probability(p, Tensor(np.ones(2))).data, 0.0)
    assert joint_probability(Tensor(0.9), Tensor(0.2)).item() == pytest.approx(0.72)


@settings(max_examples=60, deadline=None)
@given(probs, probs, st.lists(st.booleans(), min_size=2, max_size=2))
def test_joint_probability_contract(p_pos, p_neg, has):
    joint = joint_probability(Tensor(p_pos), Tensor(p_neg), np.array(has)).data
    for b in range(2):
        if has[b]:
            np.testing.assert_allclose(joint[b], p_pos[b] * (1 - p_neg[b]), atol=1e-12, rtol=0)
        else:
            np.testing.assert_array_equal(joint[b], p_pos[b])
    assert np.all((joint >= 0) & (joint <= 1))


def test_frame_attention_examples():
    np.testing.assert_allclose(frame_attention(Tensor(np.full(4, 0.3))).data, 0.25)
    o = frame_attention(Tensor(np.array([0.0, 100.0, 0.0]))).data
    np.testing.assert_allclose(o, [0, 1, 0], atol=1e-6)
    np.testing.assert_allclose(frame_attention(Tensor(np.array([0.0, np.log(2)]))).data, [1 / 3, 2 / 3])


def test_frame_attention_ignores_padding():
    o = frame_attention(Tensor(np.array([[0.2, 0.7, 0.9]])), np.array([[True, True, False]])).data
    assert o[0, 2] == 0.0
    assert o.sum() == pytest.approx(1.0)


def test_apply_attention_examples():
    v = Tensor(np.array([[1.0, 1.0], [2.0, 2.0]]))
    np.testing.assert_allclose(apply_attention(v, Tensor(np.array([0.25, 0.75]))).data, [[0.25, 0.25], [1.5, 1.5]])
    np.testing.assert_allclose(apply_attention(v, Tensor(np.full(2, 0.5))).data, v.data * 0.5)
    np.testing.assert_array_equal(apply_attention(v, Tensor(np.array([0.0, 1.0]))).data[0], 0.0)
    with pytest.raises(ContractError):
        apply_attention(v, Tensor(np.ones(3)))


def test_attentive_pool_examples():
    rows = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(attentive_pool(Tensor(rows[:1]), Tensor(np.ones((2, 1)))).data, rows[0])
    np.testing.assert_allclose(attentive_pool(Tensor(rows), Tensor(np.zeros((2, 1)))).data, rows.mean(axis=0))
    W = Tensor(np.array([[0.0], [np.log(3.0)]]))
    np.testing.assert_allclose(attentive_pool(Tensor(rows), W).data, 0.25 * rows[0] + 0.75 * rows[1])


def test_semantic_score_examples():
    v = Tensor(np.array([0.3, -1.2]))
    assert semantic_score(v, v).item() == pytest.approx(1.0)
    assert semantic_score(v, Tensor(-v.data)).item() == pytest.approx(-1.0)
    assert semantic_score(Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.6, 0.8]))).item() == pytest.approx(0.6)
    with pytest.raises(DomainError):
        semantic_score(Tensor(np.zeros(2)), v)


def test_positional_query_examples():
    model = MomentDetector(tiny_model_config())
    dec = model.decoder
    cw = Tensor(np.array([[0.3, 0.2], [0.3, 0.2]]))
    P = dec.positional_query(cw).data
    np.testing.assert_array_equal(P[0], P[1])
    pe = dec.span_embedding(Tensor(np.array([[0.0, 0.5]]))).data[0]
    assert pe.shape == (16,)
    np.testing.assert_allclose(pe[:8], np.tile([0.0, 1.0], 4), atol=1e-15)
    np.testing.assert_allclose(pe[8:], sine_embed(np.array(0.5), 8), atol=1e-12)


def test_decoder_prediction_count_and_zero_refinement():
    model = MomentDetector(tiny_model_config(num_spans=10, decoder_layers=2)).eval()
    for layer in model.decoder.layers:
        _zero(layer.span_offset)
    rng = np.random.default_rng(4)
    for lv in (6, 11):
        out = model(*_inputs(rng, lv=lv), mode="infer")
        assert out.spans_cw.shape == (2, 10, 2)
        np.testing.assert_allclose(out.spans_cw.data[0], ad.sigmoid(model.decoder.span_logits).data, atol=1e-15)
        assert len(out.predictions()[0]) == 10
        for attn in out.cross_attention:
            np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)


def test_infer_mode_uses_positive_probability_only():
    model = MomentDetector(tiny_model_config()).eval()
    rng = np.random.default_rng(5)
    video, vm, text, tm = _inputs(rng)
    neg = rng.normal(size=text.shape)
    infer = model(video, vm, text, tm, neg, tm, mode="infer")
    assert infer.probs.p_neg is None
    np.testing.assert_array_equal(infer.probs.p_joint.data, infer.probs.p_pos.data)
    absent = model(video, vm, text, tm, mode="train")
    np.testing.assert_array_equal(absent.probs.p_joint.data, infer.probs.p_joint.data)
    np.testing.assert_array_equal(absent.spans_cw.data, infer.spans_cw.data)
    trained = model(video, vm, text, tm, neg, tm, np.array([True, False]), mode="train")
    np.testing.assert_array_equal(trained.probs.p_joint.data[1], infer.probs.p_pos.data[1])
    pj = trained.probs.p_pos.data[0] * (1 - trained.probs.p_neg.data[0])
    np.testing.assert_allclose(trained.probs.p_joint.data[0], pj, atol=1e-12, rtol=0)


def test_forward_shapes():
    model = MomentDetector(tiny_model_config())
    out = model(*_inputs(np.random.default_rng(6), b=3, lv=9), mode="train")
    assert out.logits.shape == (3, 4, 2)
    assert out.probs.p_pos.shape == (3, 9)
    assert out.v_hat.shape == (3, 16) and out.q_hat.shape == (3, 16)


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(d_model=30, heads=4)
    with pytest.raises(ContractError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ShapeError):
        MomentDetector(tiny_model_config())(np.ones((1, 4)), np.ones((1, 4), bool), np.ones((1, 2, 6)), np.ones((1, 2), bool))
