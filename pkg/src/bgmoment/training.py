"""Set matching, the loss suite, and the training/evaluation loops."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import AdamWState, Tensor
from .data import GroundingDataset, Sample, batch_iterator
from .errors import ContractError, EligibilityError, NumericError
from .metrics import EvalResult, evaluate_predictions, rank_predictions
from .model import ModelOutput, MomentDetector, MomentPrediction, similarity_matrix
from .nn import Module, xavier_uniform
from .sampling import NegativeSamplerConfig, select_negative
from .temporal import FrameTimeline, Span, giou, giou_t, shift_probability_gate, temporal_shift

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    l1: float = 1.0
    iou: float = 8.0
    cls: float = 8.0
    margin: float = 1.0
    prob: float = 1.0
    semantic: float = 1.0
    delta: float = 0.2
    tau: float = 0.07
    background_weight: float = 0.1
    max_margin_pairs: int = 256
    literal_semantic_denominator: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"loss.tau must be positive, got {self.tau}")
        for name in ("l1", "iou", "cls", "margin", "prob", "semantic", "background_weight"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss.{name} must be non-negative, got {getattr(self, name)}")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    total_cost: float


@dataclass
class FrameIndexSets:
    fore: np.ndarray
    back: np.ndarray


@dataclass
class LossBreakdown:
    moment: Tensor
    cls: Tensor
    margin: Tensor
    prob: Tensor
    semantic: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("moment", "cls", "margin", "prob", "semantic", "total")}


# -- matching ---------------------------------------------------------------------------


def moment_distance(gt: np.ndarray, pred: np.ndarray, w: LossWeights) -> np.ndarray:
    """lambda_L1 * L1(start, end) + lambda_iou * (1 - gIoU), vectorized over prediction rows."""
    gt = np.asarray(gt, dtype=np.float64).reshape(1, 2)
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    l1 = np.abs(pred - gt).sum(axis=1)
    inter = np.clip(np.minimum(pred[:, 1], gt[0, 1]) - np.maximum(pred[:, 0], gt[0, 0]), 0.0, None)
    union = (pred[:, 1] - pred[:, 0]) + (gt[0, 1] - gt[0, 0]) - inter
    enclosure = np.maximum(pred[:, 1], gt[0, 1]) - np.minimum(pred[:, 0], gt[0, 0])
    g = inter / union - (enclosure - union) / enclosure
    return w.l1 * l1 + w.iou * (1.0 - g)


def matching_cost(gt: Span, pred: MomentPrediction, w: LossWeights) -> float:
    l1 = abs(pred.span.start - gt.start) + abs(pred.span.end - gt.end)
    return -pred.foreground_prob + w.l1 * l1 + w.iou * (1.0 - giou(gt, pred.span))


def hungarian_assign(costs) -> MatchResult:
    """Minimum-cost injective assignment of GT rows to prediction columns."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.size == 0:
        raise ContractError(f"cost matrix must be non-empty 2-D, got shape {costs.shape}")
    if not np.all(np.isfinite(costs)):
        raise ContractError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(costs)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return MatchResult(pairs, float(costs[rows, cols].sum()))


def match_batch(out: ModelOutput, gt_se: np.ndarray, w: LossWeights) -> np.ndarray:
    """Index of the prediction assigned to each sample's single GT."""
    fg = out.foreground_prob()
    se = out.spans_se.data
    idx = np.empty(len(gt_se), dtype=np.int64)
    for b in range(len(gt_se)):
        costs = (-fg[b] + moment_distance(gt_se[b], se[b], w))[None, :]
        idx[b] = hungarian_assign(costs).pairs[0][1]
    return idx


# -- losses --------------------------------------------------------------------------------


def moment_loss(pred_se: Tensor, gt_se: np.ndarray, w: LossWeights) -> Tensor:
    """Mean over rows of lambda_L1 (|ds| + |de|) + lambda_iou (1 - gIoU)."""
    gt_se = np.asarray(gt_se, dtype=np.float64).reshape(pred_se.shape)
    l1 = ad.sum_(ad.abs_(pred_se - gt_se), axis=-1)
    g = giou_t(pred_se, gt_se)
    return ad.mean(l1 * w.l1 + (1.0 - g) * w.iou)


def class_loss(logits: Tensor, matched: np.ndarray, w: LossWeights) -> Tensor:
    """Weighted cross-entropy; matched predictions are foreground (class 0)."""
    b, m, _ = logits.shape
    labels = np.ones((b, m), dtype=np.int64)
    labels[np.arange(b), np.asarray(matched, dtype=np.int64)] = 0
    weights = np.where(labels == 0, 1.0, w.background_weight)
    logp = ad.log_softmax(logits, axis=-1)
    onehot = np.eye(2)[labels]
    nll = -ad.sum_(logp * onehot, axis=-1)
    return ad.sum_(nll * weights) / float(weights.sum())


def margin_loss(
    frames: Tensor,
    sets: Sequence[FrameIndexSets],
    W: Tensor,
    delta: float,
    rng: np.random.Generator | None = None,
    max_pairs: int = 256,
) -> Tensor:
    """Hinge max(0, delta + s_back - s_fore) averaged over (fore, back) pairs per sample.

    Samples with more than ``max_pairs`` pairs use a random subset.
    """
    scores = ad.matmul(frames, W)[..., 0]  # (B, L)
    L = scores.shape[-1]
    fi, bi, wt = [], [], []
    valid = 0
    for b, s in enumerate(sets):
        if len(s.fore) == 0 or len(s.back) == 0:
            log.warning("margin loss: sample %d has an empty foreground or background set", b)
            continue
        ff, bb = np.meshgrid(s.fore, s.back, indexing="ij")
        ff, bb = ff.reshape(-1), bb.reshape(-1)
        if len(ff) > max_pairs:
            pick = (rng or np.random.default_rng(0)).choice(len(ff), size=max_pairs, replace=False)
            ff, bb = ff[pick], bb[pick]
        fi.append(b * L + ff)
        bi.append(b * L + bb)
        wt.append(np.full(len(ff), 1.0 / len(ff)))
        valid += 1
    if valid == 0:
        return ad.sum_(scores * 0.0)
    flat = ad.reshape(scores, (-1,))
    fi, bi, wt = np.concatenate(fi), np.concatenate(bi), np.concatenate(wt)
    hinge = ad.relu(delta + flat[bi] - flat[fi])
    return ad.sum_(hinge * wt) / float(valid)


def frame_prob_loss(p: Tensor, sets: Sequence[FrameIndexSets]) -> Tensor:
    """Mean over samples of 1 - mean_fore(p) + mean_back(p)."""
    p = ad.as_tensor(p)
    if p.ndim == 1:
        p = ad.reshape(p, (1, -1))
    wf = np.zeros(p.shape)
    wb = np.zeros(p.shape)
    for b, s in enumerate(sets):
        if len(s.fore):
            wf[b, s.fore] = 1.0 / len(s.fore)
        if len(s.back):
            wb[b, s.back] = 1.0 / len(s.back)
        if not len(s.fore) or not len(s.back):
            log.warning("probability loss: sample %d has an empty foreground or background set", b)
    per = 1.0 - ad.sum_(p * wf, axis=-1) + ad.sum_(p * wb, axis=-1)
    return ad.mean(per)


def semantic_alignment_loss(v_hat: Tensor, q_hat: Tensor, tau: float, literal: bool = False) -> Tensor:
    """In-batch contrastive loss over cosine scores S(v_i, q_j) / tau.

    The denominator includes the positive pair unless ``literal`` is set, in
    which case it runs over the off-diagonal pairs only.
    """
    n = v_hat.shape[0]
    if n < 2:
        log.warning("semantic alignment loss needs at least two pairs; contributing 0")
        return ad.sum_(v_hat * 0.0)
    S = similarity_matrix(v_hat, q_hat) / tau
    diag = np.eye(n, dtype=bool)
    if literal:
        S_den = S + np.where(diag, -np.inf, 0.0)
    else:
        S_den = S
    shift = S_den.data.max(axis=1, keepdims=True)
    lse = ad.log(ad.sum_(ad.exp(S_den - shift), axis=1)) + shift[:, 0]
    pos = ad.sum_(S * diag.astype(np.float64), axis=1)
    return ad.mean(lse - pos)


def total_loss(
    moment: Tensor, cls: Tensor, margin: Tensor, prob: Tensor, semantic: Tensor, w: LossWeights
) -> LossBreakdown:
    total = cls * w.cls + moment + margin * w.margin + prob * w.prob + semantic * w.semantic
    return LossBreakdown(moment, cls, margin, prob, semantic, total)


# -- batching ---------------------------------------------------------------------------------


def frame_sets_for(span: Span, frames: int, stride: float) -> FrameIndexSets:
    """Frame i is foreground iff its center time lies inside the span (ties count as inside)."""
    sec = span if span.unit == "seconds" else span.to_seconds(frames * stride)
    centers = (np.arange(frames) + 0.5) * stride
    inside = (centers >= sec.start) & (centers <= sec.end)
    return FrameIndexSets(np.flatnonzero(inside), np.flatnonzero(~inside))


@dataclass
class Batch:
    video: np.ndarray
    video_mask: np.ndarray
    text: np.ndarray
    text_mask: np.ndarray
    neg_text: np.ndarray | None
    neg_mask: np.ndarray | None
    has_neg: np.ndarray
    gt_se: np.ndarray
    sets: list[FrameIndexSets]
    qids: list[str]
    shifted: int = 0

    def __len__(self) -> int:
        return len(self.qids)


def _pad(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    d = seqs[0].shape[1]
    out = np.zeros((len(seqs), n, d))
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def collate(
    items: Sequence[tuple[Sample, np.ndarray, Span]],
    negatives: Sequence[Sample | None] | None = None,
) -> Batch:
    """items: (sample, frame order, GT span in seconds after any shifting)."""
    videos = [s.video[order] for s, order, _ in items]
    video, vmask = _pad(videos)
    text, tmask = _pad([s.tokens for s, _, _ in items])
    gt = np.array([[sp.start / s.duration, sp.end / s.duration] for s, _, sp in items]).clip(0.0, 1.0)
    sets = [frame_sets_for(sp, len(s.video), s.frame_stride) for s, _, sp in items]
    neg_text = neg_mask = None
    has_neg = np.zeros(len(items), dtype=bool)
    if negatives is not None and any(n is not None for n in negatives):
        has_neg = np.array([n is not None for n in negatives])
        toks = [n.tokens if n is not None else s.tokens for (s, _, _), n in zip(items, negatives)]
        neg_text, neg_mask = _pad(toks)
    return Batch(video, vmask, text, tmask, neg_text, neg_mask, has_neg, gt, sets, [s.qid for s, _, _ in items])


# -- training ------------------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    lr_schedule: str = "constant"  # or "cosine": decays to zero over `epochs`
    use_negatives: bool = True
    sampling_strategy: bool = True
    iou_threshold: float = 0.5
    similarity_threshold: float = 0.5
    use_shift: bool = True
    shift_p: float = 0.5
    shift_ignore_duration: bool = False
    eval_every: int = 1
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ContractError("train.lr and train.weight_decay must be non-negative")
        if not 0.0 <= self.shift_p <= 1.0:
            raise ContractError(f"train.shift_p must lie in [0, 1], got {self.shift_p}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError(f"train.lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the zero-based ``epoch``."""
        if self.lr_schedule == "constant" or self.epochs == 0:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(epoch, self.epochs) / self.epochs))

    def sampler(self) -> NegativeSamplerConfig:
        if not self.sampling_strategy:
            return NegativeSamplerConfig.unfiltered(self.seed)
        return NegativeSamplerConfig(self.iou_threshold, self.similarity_threshold, self.seed)


class MarginScorer(Module):
    """Linear frame scorer used only by the margin loss."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.weight = ad.parameter(xavier_uniform(rng, d, 1), name="margin_w")


@dataclass
class EpochStats:
    epoch: int
    losses: dict[str, float]
    seconds: float
    samples: int
    negatives: int
    shifted: int

    @property
    def throughput(self) -> float:
        return self.samples / self.seconds if self.seconds > 0 else float("inf")

    def line(self) -> str:
        parts = [f"epoch={self.epoch}"] + [f"{k}={v:.6f}" for k, v in self.losses.items()]
        parts += [f"negatives={self.negatives}", f"shifted={self.shifted}", f"samples={self.samples}"]
        return " ".join(parts)


class Trainer:
    def __init__(self, model: MomentDetector, cfg: TrainConfig, weights: LossWeights | None = None):
        self.model = model
        self.cfg = cfg
        self.weights = weights or LossWeights()
        seeds = np.random.SeedSequence(cfg.seed).spawn(5)
        self.rng_order, self.rng_neg, self.rng_shift, self.rng_pairs, init = (np.random.default_rng(s) for s in seeds)
        self.margin = MarginScorer(model.cfg.d_model, init)
        self.model.set_dropout_seed(int(init.integers(2**31)))
        self.opt = AdamWState(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
        self.epoch = 0

    def parameters(self) -> list[Tensor]:
        return self.model.parameters() + self.margin.parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.model.named_parameters()) + [("loss." + k, v) for k, v in self.margin.named_parameters()]

    # -- one batch ---------------------------------------------------------------------
    def prepare(self, data: GroundingDataset, indices: np.ndarray) -> Batch:
        cfg = self.cfg
        sampler = cfg.sampler()
        items, negatives = [], []
        for i in indices:
            s = data.samples[int(i)]
            neg = None
            if cfg.use_negatives:
                pool = data.pool(int(i))
                rec = select_negative(s.record(), [p.record() for p in pool], sampler, self.rng_neg)
                if rec is not None:
                    neg = next(p for p in pool if p.qid == rec.qid)
            negatives.append(neg)
            order = np.arange(len(s.video))
            span = s.span
            if cfg.use_shift:
                timeline = FrameTimeline(len(s.video), s.frame_stride)
                duration = 0.0 if cfg.shift_ignore_duration else timeline.duration
                if shift_probability_gate(duration, cfg.shift_p, self.rng_shift):
                    try:
                        if cfg.shift_ignore_duration:
                            order, span = _shift_any_length(timeline, s.span, self.rng_shift)
                        else:
                            order, span = temporal_shift(timeline, s.span, self.rng_shift)
                    except (EligibilityError, ContractError):
                        order, span = np.arange(len(s.video)), s.span
            items.append((s, order, span))
        batch = collate(items, negatives if cfg.use_negatives else None)
        batch.shifted = sum(int(not np.array_equal(order, np.arange(len(order)))) for _, order, _ in items)
        return batch

    def compute_losses(self, batch: Batch, out: ModelOutput) -> tuple[LossBreakdown, np.ndarray]:
        w = self.weights
        matched = match_batch(out, batch.gt_se, w)
        pred = out.spans_se[np.arange(len(batch)), matched]
        moment = moment_loss(pred, batch.gt_se, w)
        cls = class_loss(out.logits, matched, w)
        margin = margin_loss(out.v_prime, batch.sets, self.margin.weight, w.delta, self.rng_pairs, w.max_margin_pairs)
        prob = frame_prob_loss(out.probs.p_joint, batch.sets)
        sem = semantic_alignment_loss(out.v_hat, out.q_hat, w.tau, w.literal_semantic_denominator)
        return total_loss(moment, cls, margin, prob, sem, w), matched

    def step(self, batch: Batch) -> LossBreakdown:
        self.model.train()
        out = self.model(
            batch.video, batch.video_mask, batch.text, batch.text_mask,
            batch.neg_text, batch.neg_mask, batch.has_neg, mode="train",
        )
        losses, _ = self.compute_losses(batch, out)
        if not np.isfinite(losses.total.data):
            raise NumericError(f"non-finite loss {losses.values()} on batch {batch.qids[:4]}...")
        ad.backward(losses.total)
        params = self.parameters()
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        ad.adamw_step(params, self.opt, self.cfg.max_grad_norm)
        return losses

    def train_epoch(self, data: GroundingDataset) -> EpochStats:
        if len(data) == 0:
            raise ContractError("cannot train on an empty dataset")
        t0 = time.perf_counter()
        self.opt.lr = self.cfg.lr_at(self.epoch)
        sums: dict[str, float] = {}
        n = negs = shifted = 0
        for bi, idx in enumerate(batch_iterator(len(data), self.cfg.batch_size, self.rng_order)):
            batch = self.prepare(data, idx)
            try:
                losses = self.step(batch)
            except NumericError as exc:
                raise NumericError(f"epoch {self.epoch + 1}, batch {bi}: {exc}") from None
            for k, v in losses.values().items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
            n += len(batch)
            negs += int(batch.has_neg.sum())
            shifted += batch.shifted
        self.epoch += 1
        return EpochStats(self.epoch, {k: v / n for k, v in sums.items()}, time.perf_counter() - t0, n, negs, shifted)


def _shift_any_length(timeline: FrameTimeline, span: Span, rng: np.random.Generator):
    """Temporal shift without the short-video eligibility rule (ablation only)."""
    short = FrameTimeline(timeline.frame_count, 1.0)
    sec = Span(span.start / timeline.frame_duration, span.end / timeline.frame_duration, "seconds")
    order, new = temporal_shift(short, sec, rng)
    fd = timeline.frame_duration
    return order, Span(new.start * fd, new.end * fd, "seconds")


# -- inference ---------------------------------------------------------------------------------


@dataclass
class QueryResult:
    qid: str
    gt: np.ndarray  # normalized start/end
    scores: np.ndarray  # (M,)
    spans: np.ndarray  # (M, 2) normalized, clamped
    p_joint: np.ndarray  # (L_v,)
    attention: np.ndarray  # (L_v,)
    inside: np.ndarray  # (L_v,) bool

    def ranked(self) -> np.ndarray:
        return rank_predictions(self.scores, self.spans)


def predict(model: MomentDetector, data: GroundingDataset, batch_size: int = 64) -> list[QueryResult]:
    model.eval()
    results = []
    with ad.no_grad():
        for idx in batch_iterator(len(data), batch_size, np.random.default_rng(0), shuffle=False):
            items = [(data.samples[int(i)], np.arange(len(data.samples[int(i)].video)), data.samples[int(i)].span) for i in idx]
            batch = collate(items)
            out = model(batch.video, batch.video_mask, batch.text, batch.text_mask, mode="infer")
            fg = out.foreground_prob()
            preds = out.predictions()
            for b, (s, _, _) in enumerate(items):
                L = len(s.video)
                spans = np.array([[p.span.start, p.span.end] for p in preds[b]])
                inside = np.zeros(L, dtype=bool)
                inside[batch.sets[b].fore] = True
                results.append(
                    QueryResult(
                        s.qid, batch.gt_se[b], fg[b].copy(), spans,
                        out.probs.p_joint.data[b, :L].copy(), out.probs.o.data[b, :L].copy(), inside,
                    )
                )
    model.train()
    return results


def evaluate(model: MomentDetector, data: GroundingDataset, batch_size: int = 64) -> tuple[EvalResult, list[QueryResult]]:
    results = predict(model, data, batch_size)
    res = evaluate_predictions(
        [r.ranked() for r in results], [r.gt for r in results],
        [r.p_joint for r in results], [r.inside for r in results],
    )
    return res, results


def fit(
    trainer: Trainer,
    train: GroundingDataset,
    val: GroundingDataset | None = None,
    on_epoch: Callable[[EpochStats, EvalResult | None], None] | None = None,
) -> list[tuple[EpochStats, EvalResult | None]]:
    history = []
    for _ in range(trainer.cfg.epochs):
        stats = trainer.train_epoch(train)
        res = None
        if val is not None and trainer.cfg.eval_every and trainer.epoch % trainer.cfg.eval_every == 0:
            res, _ = evaluate(trainer.model, val)
        history.append((stats, res))
        if on_epoch is not None:
            on_epoch(stats, res)
    return history
