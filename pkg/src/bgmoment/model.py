"""Background-aware moment detector: encoder, frame matcher, span decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DomainError, ShapeError
from .nn import MLP, LayerNorm, Linear, Module, MultiheadAttention, sine_embed, sine_embed_t
from .temporal import Span, from_center_width


@dataclass
class ModelConfig:
    d_video: int = 500
    d_text: int = 300
    d_model: int = 256
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 8
    num_spans: int = 10
    ff_dim: int = 1024
    dropout: float = 0.1
    # scale o by the number of valid frames so uniform attention leaves v unchanged
    rescale_attention: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("d_video", "d_text", "d_model", "encoder_layers", "decoder_layers", "heads", "num_spans", "ff_dim"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"model.{name} must be a positive integer, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ContractError(f"model.d_model={self.d_model} is not divisible by model.heads={self.heads}")
        if self.d_model % 4:
            raise ContractError(f"model.d_model={self.d_model} must be a multiple of 4 for span embeddings")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"model.dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    X: Tensor
    video_len: int

    @property
    def v(self) -> Tensor:
        return self.X[:, : self.video_len]

    @property
    def q(self) -> Tensor:
        return self.X[:, self.video_len :]


@dataclass
class FrameProbabilities:
    p_pos: Tensor
    p_neg: Tensor | None
    p_joint: Tensor
    o: Tensor


@dataclass
class MomentPrediction:
    foreground_prob: float
    span: Span


@dataclass
class ModelOutput:
    logits: Tensor  # (B, M, 2), class 0 = foreground
    spans_cw: Tensor  # (B, M, 2) squashed center/width
    spans_se: Tensor  # (B, M, 2) start/end, unclamped
    probs: FrameProbabilities
    v_prime: Tensor
    v_hat: Tensor
    q_hat: Tensor
    video_mask: np.ndarray
    cross_attention: list[np.ndarray] = field(default_factory=list)

    def foreground_prob(self) -> np.ndarray:
        z = self.logits.data
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e[..., 0] / e.sum(axis=-1)

    def predictions(self) -> list[list[MomentPrediction]]:
        fg = self.foreground_prob()
        cw = self.spans_cw.data
        return [
            [MomentPrediction(float(fg[b, m]), from_center_width(cw[b, m, 0], cw[b, m, 1])) for m in range(cw.shape[1])]
            for b in range(cw.shape[0])
        ]


def frame_positions(video_mask: np.ndarray) -> np.ndarray:
    """Normalized frame-center times per sample; padded frames map to 0."""
    mask = np.asarray(video_mask, dtype=bool)
    lengths = mask.sum(axis=1, keepdims=True).clip(min=1)
    idx = np.arange(mask.shape[1])[None, :]
    return np.where(mask, (idx + 0.5) / lengths, 0.0)


def l2_normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, eps)


# -- components ------------------------------------------------------------------


class InputProjection(Module):
    """Row-normalize (unit RMS), then a two-layer MLP into the hidden width."""

    def __init__(self, d_in: int, d: int, rng: np.random.Generator, dropout: float):
        self.d_in = d_in
        self.mlp = MLP([d_in, d, d], rng, dropout)

    def __call__(self, x: np.ndarray) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise ContractError(f"projection expects feature width {self.d_in}, got {x.shape[-1]}")
        # unit L2 norm, rescaled to unit RMS so content is on the scale of the positional code
        return self.mlp(Tensor(l2_normalize_rows(x) * np.sqrt(self.d_in)))


class EncoderLayer(Module):
    def __init__(self, d: int, heads: int, ff: int, rng: np.random.Generator, dropout: float):
        self.attn = MultiheadAttention(d, d, heads, rng, dropout)
        self.ff = MLP([d, ff, d], rng, dropout)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.attn(x, x, x, key_mask=mask)
        x = self.norm1(x + ad.dropout(h, self.dropout, self.rng, self.training))
        h = self.ff(x)
        return self.norm2(x + ad.dropout(h, self.dropout, self.rng, self.training))


class FrameMatcher(Module):
    """Per-frame match probability sigmoid(tanh(f W1) W2)."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.fc1 = Linear(d, d // 2, rng)
        self.fc2 = Linear(d // 2, 1, rng)

    def __call__(self, frames: Tensor) -> Tensor:
        h = ad.tanh(self.fc1(frames))
        return ad.sigmoid(self.fc2(h))[..., 0]


class DecoderLayer(Module):
    def __init__(self, d: int, heads: int, ff: int, rng: np.random.Generator, dropout: float):
        self.self_attn = MultiheadAttention(d, d, heads, rng, dropout)
        self.cross_attn = MultiheadAttention(2 * d, d, heads, rng, dropout)
        self.ff = MLP([d, ff, d], rng, dropout)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.norm3 = LayerNorm(d)
        self.span_offset = MLP([d, d, 2], rng)
        last = self.span_offset.layers[-1]
        last.weight.data[...] = 0.0
        self.dropout = dropout
        self.rng = rng


class SpanDecoder(Module):
    """Decoder whose queries are learnable (center, width) spans refined per layer."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.d = d
        self.layers = [DecoderLayer(d, cfg.heads, cfg.ff_dim, rng, cfg.dropout) for _ in range(cfg.decoder_layers)]
        self.pos_mlp = MLP([d, d, d], rng)
        self.scale_mlp = MLP([d, d, d], rng)
        init = rng.uniform(0.0, 1.0, size=(cfg.num_spans, 2))
        self.span_logits = ad.parameter(ad.inverse_sigmoid(init), name="span_logits")
        self.embeddings = ad.parameter(np.zeros((cfg.num_spans, d)), name="decoder_embeddings")
        self.class_head = Linear(d, 2, rng)

    def span_embedding(self, cw: Tensor) -> Tensor:
        """PE(c) || PE(w), each half the hidden width."""
        half = self.d // 2
        return ad.concat([sine_embed_t(cw[..., 0], half), sine_embed_t(cw[..., 1], half)], axis=-1)

    def positional_query(self, cw: Tensor) -> Tensor:
        return self.pos_mlp(self.span_embedding(cw))

    def __call__(self, memory: Tensor, memory_pos: np.ndarray, memory_mask: np.ndarray):
        b = memory.shape[0]
        m, d = self.embeddings.shape
        D = ad.broadcast_to(self.embeddings, (b, m, d))
        logits = ad.broadcast_to(self.span_logits, (b, m, 2))
        keys = ad.concat([memory, Tensor(memory_pos)], axis=-1)
        attn_maps = []
        for layer in self.layers:
            cw = ad.sigmoid(logits)
            pe = self.span_embedding(cw)
            P = self.pos_mlp(pe)
            qk = D + P
            h = layer.self_attn(qk, qk, D)
            D = layer.norm1(D + ad.dropout(h, layer.dropout, layer.rng, layer.training))
            q = ad.concat([D, pe * ad.sigmoid(self.scale_mlp(D))], axis=-1)
            h = layer.cross_attn(q, keys, memory, key_mask=memory_mask)
            attn_maps.append(layer.cross_attn.last_attention)
            D = layer.norm2(D + ad.dropout(h, layer.dropout, layer.rng, layer.training))
            h = layer.ff(D)
            D = layer.norm3(D + ad.dropout(h, layer.dropout, layer.rng, layer.training))
            logits = logits + layer.span_offset(D)
        return self.class_head(D), ad.sigmoid(logits), attn_maps


# -- full model -----------------------------------------------------------------------


class MomentDetector(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.video_proj = InputProjection(cfg.d_video, d, rng, cfg.dropout)
        self.text_proj = InputProjection(cfg.d_text, d, rng, cfg.dropout)
        self.encoder_layers = [EncoderLayer(d, cfg.heads, cfg.ff_dim, rng, cfg.dropout) for _ in range(cfg.encoder_layers)]
        self.matcher = FrameMatcher(d, rng)
        self.pool_video = ad.parameter(rng.uniform(-1, 1, (d, 1)) * np.sqrt(6.0 / (d + 1)), name="pool_video")
        self.pool_text = ad.parameter(rng.uniform(-1, 1, (d, 1)) * np.sqrt(6.0 / (d + 1)), name="pool_text")
        self.decoder = SpanDecoder(cfg, rng)
        # dropout masks draw from their own stream so parameter init stays stable
        self.set_dropout_seed(cfg.seed + 1)

    def set_dropout_seed(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for m in self.modules():
            if hasattr(m, "rng"):
                m.rng = rng

    # -- stages ---------------------------------------------------------------
    def project_inputs(self, video: np.ndarray, text: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.video_proj(video), self.text_proj(text)

    def encode(self, V: Tensor, Q: Tensor, video_mask: np.ndarray, text_mask: np.ndarray) -> EncoderOutput:
        d = self.cfg.d_model
        if V.shape[-1] != d or Q.shape[-1] != d:
            raise ContractError(f"encoder expects width {d}, got {V.shape[-1]} and {Q.shape[-1]}")
        pe = sine_embed(frame_positions(video_mask), d) * np.asarray(video_mask, dtype=np.float64)[..., None]
        x = ad.concat([V + pe, Q], axis=1)
        mask = np.concatenate([video_mask, text_mask], axis=1)
        for layer in self.encoder_layers:
            x = layer(x, mask)
        return EncoderOutput(x, V.shape[1])

    def pfm(self, frames: Tensor) -> Tensor:
        return self.matcher(frames)

    def forward(
        self,
        video: np.ndarray,
        video_mask: np.ndarray,
        text: np.ndarray,
        text_mask: np.ndarray,
        neg_text: np.ndarray | None = None,
        neg_mask: np.ndarray | None = None,
        has_neg: np.ndarray | None = None,
        mode: str = "train",
    ) -> ModelOutput:
        if mode not in ("train", "infer"):
            raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
        video = np.asarray(video, dtype=np.float64)
        video_mask = np.asarray(video_mask, dtype=bool)
        text_mask = np.asarray(text_mask, dtype=bool)
        if video.ndim != 3:
            raise ShapeError(f"video features must be (batch, frames, dim), got {video.shape}")

        V, Q = self.project_inputs(video, text)
        enc = self.encode(V, Q, video_mask, text_mask)
        v_pos = enc.v
        p_pos = self.pfm(v_pos)

        p_neg = None
        use_neg = mode == "train" and neg_text is not None
        if use_neg:
            has_neg = np.ones(video.shape[0], dtype=bool) if has_neg is None else np.asarray(has_neg, dtype=bool)
            use_neg = bool(has_neg.any())
        if use_neg:
            Qn = self.text_proj(neg_text)
            enc_neg = self.encode(V, Qn, video_mask, np.asarray(neg_mask, dtype=bool))
            p_neg = self.pfm(enc_neg.v)
            p_joint = joint_probability(p_pos, p_neg, has_neg)
        else:
            p_joint = joint_probability(p_pos, None)

        o = frame_attention(p_joint, video_mask)
        scale = o * video_mask.sum(axis=1, keepdims=True) if self.cfg.rescale_attention else o
        v_prime = apply_attention(v_pos, scale)
        x_prime = ad.concat([v_prime, enc.q], axis=1)

        v_hat = attentive_pool(v_prime, self.pool_video, video_mask)
        q_hat = attentive_pool(enc.q, self.pool_text, text_mask)

        memory_mask = np.concatenate([video_mask, text_mask], axis=1)
        d = self.cfg.d_model
        pos = sine_embed(frame_positions(video_mask), d) * video_mask[..., None]
        memory_pos = np.concatenate([pos, np.zeros(text_mask.shape + (d,))], axis=1)
        logits, cw, attn = self.decoder(x_prime, memory_pos, memory_mask)
        c, w = cw[..., 0:1], cw[..., 1:2]
        se = ad.concat([c - w * 0.5, c + w * 0.5], axis=-1)
        probs = FrameProbabilities(p_pos, p_neg, p_joint, o)
        return ModelOutput(logits, cw, se, probs, v_prime, v_hat, q_hat, video_mask, attn)

    __call__ = forward


# -- stateless stages (exposed for direct use and testing) ---------------------------------


def joint_probability(p_pos: Tensor, p_neg: Tensor | None, has_neg: np.ndarray | None = None) -> Tensor:
    """p_pos * (1 - p_neg); exactly p_pos when no negative is present."""
    p_pos = ad.as_tensor(p_pos)
    if p_neg is None:
        return p_pos
    p_neg = ad.as_tensor(p_neg)
    if p_neg.shape != p_pos.shape:
        raise ContractError(f"probability shapes differ: {p_pos.shape} vs {p_neg.shape}")
    if has_neg is None:
        return p_pos * (1.0 - p_neg)
    gate = np.asarray(has_neg, dtype=np.float64).reshape((-1,) + (1,) * (p_pos.ndim - 1))
    # rows without a negative see p_pos * (1 - 0) == p_pos bit for bit
    return p_pos * (1.0 - p_neg * gate)


def frame_attention(p_joint: Tensor, video_mask: np.ndarray | None = None) -> Tensor:
    p_joint = ad.as_tensor(p_joint)
    if video_mask is None:
        return ad.softmax(p_joint, axis=-1)
    bias = np.where(np.asarray(video_mask, dtype=bool), 0.0, -np.inf)
    return ad.softmax(p_joint + bias, axis=-1)


def apply_attention(v: Tensor, o: Tensor) -> Tensor:
    v, o = ad.as_tensor(v), ad.as_tensor(o)
    if v.shape[:-1] != o.shape:
        raise ContractError(f"attention of shape {o.shape} does not match frames {v.shape}")
    return v * ad.expand_dims(o, -1)


def attentive_pool(rows: Tensor, W: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax(rows W)-weighted sum of rows over the sequence axis."""
    rows, W = ad.as_tensor(rows), ad.as_tensor(W)
    if rows.shape[-2] < 1:
        raise ContractError("attentive pooling needs at least one row")
    scores = ad.matmul(rows, W)[..., 0]
    if mask is not None:
        scores = scores + np.where(np.asarray(mask, dtype=bool), 0.0, -np.inf)
    a = ad.softmax(scores, axis=-1)
    return ad.sum_(rows * ad.expand_dims(a, -1), axis=-2)


def semantic_score(v_hat: Tensor, q_hat: Tensor) -> Tensor:
    """Cosine similarity along the last axis."""
    v_hat, q_hat = ad.as_tensor(v_hat), ad.as_tensor(q_hat)
    if np.any(np.linalg.norm(v_hat.data, axis=-1) == 0) or np.any(np.linalg.norm(q_hat.data, axis=-1) == 0):
        raise DomainError("semantic score of a zero vector")
    num = ad.sum_(v_hat * q_hat, axis=-1)
    nv = ad.sqrt(ad.sum_(v_hat * v_hat, axis=-1))
    nq = ad.sqrt(ad.sum_(q_hat * q_hat, axis=-1))
    return num / (nv * nq)


def similarity_matrix(v_hat: Tensor, q_hat: Tensor) -> Tensor:
    """Pairwise cosine S[i, j] between rows of v_hat and rows of q_hat."""
    vn = ad.l2_normalize(v_hat, axis=-1)
    qn = ad.l2_normalize(q_hat, axis=-1)
    return ad.matmul(vn, ad.transpose(qn))
