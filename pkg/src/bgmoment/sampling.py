"""Choosing a background (negative) query from the same video."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .temporal import Span, iou


@dataclass
class QueryRecord:
    qid: str
    video_id: str
    span: Span
    token_embeddings: np.ndarray
    sentence_embedding: np.ndarray
    text: str = ""

    def __post_init__(self):
        self.token_embeddings = np.atleast_2d(np.asarray(self.token_embeddings, dtype=np.float64))
        self.sentence_embedding = np.asarray(self.sentence_embedding, dtype=np.float64).reshape(-1)
        if self.token_embeddings.shape[0] < 1:
            raise ContractError(f"query {self.qid} has no tokens")


@dataclass
class NegativeSamplerConfig:
    iou_threshold: float = 0.5
    similarity_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ContractError(f"iou_threshold must lie in [0, 1], got {self.iou_threshold}")
        if not -1.0 <= self.similarity_threshold:
            raise ContractError(f"similarity_threshold must be >= -1, got {self.similarity_threshold}")

    @classmethod
    def unfiltered(cls, seed: int = 0) -> NegativeSamplerConfig:
        """Thresholds that admit every pool member (uniform sampling)."""
        return cls(iou_threshold=1.0, similarity_threshold=1.0 + 1e-9, seed=seed)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ContractError(f"cosine similarity of vectors with lengths {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def eligible_negatives(
    target: QueryRecord, pool: Sequence[QueryRecord], cfg: NegativeSamplerConfig
) -> list[QueryRecord]:
    out = []
    for q in pool:
        if q.video_id != target.video_id:
            raise ContractError(
                f"negative candidate {q.qid} belongs to video {q.video_id}, target {target.qid} to {target.video_id}"
            )
        if q.qid == target.qid:
            raise ContractError(f"target {target.qid} appears in its own negative pool")
        # strict inequality with thresholds >= 1 admits everything
        if iou(q.span, target.span) >= cfg.iou_threshold and cfg.iou_threshold < 1.0:
            continue
        if cosine_similarity(q.sentence_embedding, target.sentence_embedding) >= cfg.similarity_threshold:
            continue
        out.append(q)
    return out


def select_negative(
    target: QueryRecord,
    pool: Sequence[QueryRecord],
    cfg: NegativeSamplerConfig,
    rng: np.random.Generator,
) -> QueryRecord | None:
    """Uniformly pick an eligible negative, or None when nothing qualifies."""
    candidates = eligible_negatives(target, pool, cfg)
    if not candidates:
        return None
    return candidates[int(rng.integers(len(candidates)))]
