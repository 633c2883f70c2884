"""Span geometry and the ground-truth relocation augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DomainError, EligibilityError

Unit = Literal["seconds", "normalized"]

SHIFT_MAX_DURATION = 60.0


@dataclass(frozen=True)
class Span:
    start: float
    end: float
    unit: Unit = "normalized"

    def __post_init__(self):
        if self.unit not in ("seconds", "normalized"):
            raise ContractError(f"unknown span unit {self.unit!r}")
        if not self.start <= self.end:
            raise ContractError(f"span start {self.start} exceeds end {self.end}")
        if self.unit == "normalized" and not (0.0 <= self.start and self.end <= 1.0):
            raise ContractError(f"normalized span ({self.start}, {self.end}) leaves [0, 1]")

    @property
    def length(self) -> float:
        return self.end - self.start

    def normalized(self, duration: float) -> Span:
        if self.unit == "normalized":
            return self
        return Span(min(self.start / duration, 1.0), min(self.end / duration, 1.0), "normalized")

    def to_seconds(self, duration: float) -> Span:
        if self.unit == "seconds":
            return self
        return Span(self.start * duration, self.end * duration, "seconds")


@dataclass(frozen=True)
class FrameTimeline:
    frame_count: int
    frame_duration: float = 1.0

    def __post_init__(self):
        if self.frame_count < 1:
            raise ContractError(f"timeline needs at least one frame, got {self.frame_count}")
        if not self.frame_duration > 0:
            raise ContractError(f"frame duration must be positive, got {self.frame_duration}")

    @property
    def duration(self) -> float:
        return self.frame_count * self.frame_duration

    def frame_centers(self) -> np.ndarray:
        return (np.arange(self.frame_count) + 0.5) * self.frame_duration


def _same_unit(a: Span, b: Span) -> None:
    if a.unit != b.unit:
        raise ContractError(f"spans use different units: {a.unit} vs {b.unit}")


def iou(a: Span, b: Span) -> float:
    _same_unit(a, b)
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Span, b: Span) -> float:
    _same_unit(a, b)
    if a.length <= 0.0 and b.length <= 0.0:
        raise DomainError("generalized IoU is undefined for two zero-length spans")
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    enclosure = max(a.end, b.end) - min(a.start, b.start)
    return inter / union - (enclosure - union) / enclosure


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between rows of (n, 2) and (m, 2) start/end arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    enclosure = np.maximum(a[:, None, 1], b[None, :, 1]) - np.minimum(a[:, None, 0], b[None, :, 0])
    if np.any(enclosure <= 0):
        raise DomainError("generalized IoU is undefined for two zero-length spans")
    return inter / union - (enclosure - union) / enclosure


def giou_t(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable gIoU between predicted (..., 2) start/end rows and constant targets."""
    ps, pe = pred[..., 0], pred[..., 1]
    gs, ge = gt[..., 0], gt[..., 1]
    inter = ad.relu(ad.minimum(pe, ge) - ad.maximum(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    enclosure = ad.maximum(pe, ge) - ad.minimum(ps, gs)
    return inter / union - (enclosure - union) / enclosure


def center_width(span: Span) -> tuple[float, float]:
    if span.unit != "normalized":
        raise ContractError("center/width conversion works on normalized spans")
    return (span.start + span.end) / 2.0, span.end - span.start


def from_center_width(c: float, w: float) -> Span:
    start = min(max(c - w / 2.0, 0.0), 1.0)
    end = min(max(c + w / 2.0, 0.0), 1.0)
    return Span(start, max(start, end), "normalized")


def cw_to_se(cw):
    """(..., 2) center/width rows to start/end rows; works on arrays and tensors."""
    if isinstance(cw, Tensor):
        c, w = cw[..., 0:1], cw[..., 1:2]
        return ad.concat([c - w * 0.5, c + w * 0.5], axis=-1)
    cw = np.asarray(cw, dtype=np.float64)
    return np.stack([cw[..., 0] - cw[..., 1] / 2.0, cw[..., 0] + cw[..., 1] / 2.0], axis=-1)


def se_to_cw(se: np.ndarray) -> np.ndarray:
    se = np.asarray(se, dtype=np.float64)
    return np.stack([(se[..., 0] + se[..., 1]) / 2.0, se[..., 1] - se[..., 0]], axis=-1)


def span_to_frames(span: Span, timeline: FrameTimeline) -> tuple[int, int]:
    """Half-open frame range [first, stop) covering the frames whose centers lie in the span."""
    sec = span if span.unit == "seconds" else span.to_seconds(timeline.duration)
    centers = timeline.frame_centers()
    inside = np.flatnonzero((centers >= sec.start) & (centers <= sec.end))
    if inside.size == 0:
        return 0, 0
    return int(inside[0]), int(inside[-1]) + 1


def frame_block(span: Span, timeline: FrameTimeline) -> tuple[int, int]:
    """Frame range occupied by a span aligned to frame boundaries."""
    sec = span if span.unit == "seconds" else span.to_seconds(timeline.duration)
    first = int(round(sec.start / timeline.frame_duration))
    stop = int(round(sec.end / timeline.frame_duration))
    first = min(max(first, 0), timeline.frame_count)
    stop = min(max(stop, first), timeline.frame_count)
    return first, stop


def shift_order(frame_count: int, first: int, stop: int, new_start: int) -> np.ndarray:
    """Frame order after moving block [first, stop) so it begins at ``new_start``."""
    block = np.arange(first, stop)
    rest = np.concatenate([np.arange(0, first), np.arange(stop, frame_count)])
    return np.concatenate([rest[:new_start], block, rest[new_start:]])


def temporal_shift(
    frames: FrameTimeline,
    gt: Span,
    rng: np.random.Generator,
    new_start: int | None = None,
) -> tuple[np.ndarray, Span]:
    """Relocate the ground-truth frame block to a uniformly drawn start index.

    Returns the new frame order (a permutation of frame indices; position j of
    the shifted video shows original frame ``order[j]``) and the relocated span
    in seconds.  Background frames keep their relative order.
    """
    if frames.duration >= SHIFT_MAX_DURATION:
        raise EligibilityError(f"video of {frames.duration:g}s is too long for temporal shifting")
    first, stop = frame_block(gt, frames)
    length = stop - first
    if length >= frames.frame_count:
        raise ContractError(f"ground truth covers {length} of {frames.frame_count} frames; nothing to shift")
    if new_start is None:
        new_start = int(rng.integers(0, frames.frame_count - length + 1))
    elif not 0 <= new_start <= frames.frame_count - length:
        raise ContractError(f"new start {new_start} outside [0, {frames.frame_count - length}]")
    order = shift_order(frames.frame_count, first, stop, new_start)
    fd = frames.frame_duration
    return order, Span(new_start * fd, (new_start + length) * fd, "seconds")


def remap_span(span: Span, order: np.ndarray, timeline: FrameTimeline) -> Span | None:
    """Carry another query's span through a frame permutation.

    Returns None when the frames of the span are no longer contiguous.
    """
    first, stop = frame_block(span, timeline)
    if stop <= first:
        return None
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    positions = np.sort(inverse[first:stop])
    if positions[-1] - positions[0] != stop - first - 1:
        return None
    fd = timeline.frame_duration
    return Span(positions[0] * fd, (positions[-1] + 1) * fd, "seconds")


def shift_probability_gate(duration: float, p_apply: float, rng: np.random.Generator) -> bool:
    if not 0.0 <= p_apply <= 1.0:
        raise ContractError(f"p_apply must lie in [0, 1], got {p_apply}")
    if duration >= SHIFT_MAX_DURATION or p_apply == 0.0:
        return False
    if p_apply == 1.0:
        return True
    return bool(rng.random() < p_apply)
