"""Annotations, feature files, and the synthetic grounded-video generator.

On-disk layout of a dataset directory::

    <root>/
      train.jsonl, test.jsonl, ...   annotation files (one JSON object per line)
      features/video/<video_id>.bmft
      features/text/<qid>.bmft       token embeddings, one row per token
      synth_spec.json                present when the data is synthetic

Annotation records carry a ``"type"`` of ``"video"`` or ``"query"``:

- video: ``video_id``, ``duration`` (seconds), ``frame_stride`` (seconds),
  ``feature_ref`` (path relative to the annotation file's directory)
- query: ``qid``, ``video_id``, ``start``, ``end`` (seconds), ``feature_ref``,
  ``sentence_embedding`` (list of floats), ``text``
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, FormatError, GenerationError, ValidationError
from .sampling import QueryRecord
from .temporal import Span

log = logging.getLogger(__name__)

BMFT_MAGIC = b"BMFT"
BMFT_VERSION = 1
_HEADER = struct.Struct("<4sBII")


# -- feature files ----------------------------------------------------------------------


def write_features(path, matrix) -> None:
    """Write a rows x dim matrix as BMFT: magic, version byte, u32 rows, u32 dim, f32 payload (all little-endian)."""
    arr = np.asarray(matrix)
    if arr.ndim != 2:
        raise ContractError(f"feature matrix must be 2-D, got shape {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BMFT_MAGIC, BMFT_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(payload.tobytes())


def read_features(path, widen: bool = True) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise OSError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, rows, dim = _HEADER.unpack_from(raw)
    if magic != BMFT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != BMFT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = rows * dim * 4
    body = raw[_HEADER.size :]
    if len(body) != expected:
        raise OSError(f"{path}: header declares {rows}x{dim} floats ({expected} bytes) but payload has {len(body)}")
    arr = np.frombuffer(body, dtype="<f4").reshape(rows, dim)
    return arr.astype(np.float64) if widen else arr.copy()


# -- annotations --------------------------------------------------------------------------


@dataclass
class VideoRecord:
    video_id: str
    duration: float
    feature_ref: str
    frame_stride: float = 1.0


@dataclass
class QueryAnnotation:
    qid: str
    video_id: str
    start: float
    end: float
    feature_ref: str
    sentence_embedding: list[float]
    text: str = ""

    @property
    def span(self) -> Span:
        return Span(self.start, self.end, "seconds")


@dataclass
class AnnotationSet:
    videos: dict[str, VideoRecord] = field(default_factory=dict)
    queries: list[QueryAnnotation] = field(default_factory=list)

    def queries_by_video(self) -> dict[str, list[QueryAnnotation]]:
        out: dict[str, list[QueryAnnotation]] = {vid: [] for vid in self.videos}
        for q in self.queries:
            out[q.video_id].append(q)
        return out

    def validate(self, root: Path | None = None) -> None:
        for q in self.queries:
            v = self.videos.get(q.video_id)
            if v is None:
                raise ValidationError(f"query {q.qid} references unknown video {q.video_id}")
            if not (0.0 <= q.start <= q.end <= v.duration + 1e-9):
                raise ValidationError(f"query {q.qid}: span [{q.start}, {q.end}] outside [0, {v.duration}]")
        for v in self.videos.values():
            if not v.duration > 0 or not v.frame_stride > 0:
                raise ValidationError(f"video {v.video_id}: duration and stride must be positive")
        if root is not None:
            refs = [v.feature_ref for v in self.videos.values()] + [q.feature_ref for q in self.queries]
            for ref in refs:
                if not (root / ref).is_file():
                    raise FileNotFoundError(f"feature file {ref} not found under {root}")

    def subset(self, qids: Sequence[str]) -> AnnotationSet:
        keep = set(qids)
        queries = [q for q in self.queries if q.qid in keep]
        used = {q.video_id for q in queries}
        return AnnotationSet({k: v for k, v in self.videos.items() if k in used}, queries)


def save_annotations(path, ann: AnnotationSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for v in ann.videos.values():
            fh.write(json.dumps({"type": "video", **asdict(v)}) + "\n")
        for q in ann.queries:
            fh.write(json.dumps({"type": "query", **asdict(q)}) + "\n")


def load_annotations(path, check_features: bool = True) -> AnnotationSet:
    path = Path(path)
    ann = AnnotationSet()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                kind = rec.pop("type")
                if kind == "video":
                    v = VideoRecord(**rec)
                    ann.videos[v.video_id] = v
                elif kind == "query":
                    ann.queries.append(QueryAnnotation(**rec))
                else:
                    raise ValidationError(f"{path}:{lineno}: unknown record type {kind!r}")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed record ({exc})") from None
    ann.validate(path.parent if check_features else None)
    return ann


# -- in-memory dataset ---------------------------------------------------------------------


@dataclass
class Sample:
    """One training/evaluation item: a query grounded in its video."""

    qid: str
    video_id: str
    video: np.ndarray  # (L_v, d_video)
    tokens: np.ndarray  # (L_w, d_text)
    sentence: np.ndarray
    span: Span  # seconds
    duration: float
    frame_stride: float

    @property
    def span_normalized(self) -> Span:
        return self.span.normalized(self.duration)

    def record(self) -> QueryRecord:
        return QueryRecord(self.qid, self.video_id, self.span, self.tokens, self.sentence)


@dataclass
class GroundingDataset:
    samples: list[Sample]
    by_video: dict[str, list[int]]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def d_video(self) -> int:
        return self.samples[0].video.shape[1]

    @property
    def d_text(self) -> int:
        return self.samples[0].tokens.shape[1]

    def pool(self, index: int) -> list[Sample]:
        s = self.samples[index]
        return [self.samples[j] for j in self.by_video[s.video_id] if j != index]

    @classmethod
    def from_annotations(cls, ann: AnnotationSet, root, cache: dict | None = None) -> GroundingDataset:
        root = Path(root)
        cache = {} if cache is None else cache

        def feat(ref: str) -> np.ndarray:
            if ref not in cache:
                cache[ref] = read_features(root / ref)
            return cache[ref]

        return cls._build(ann, feat)

    @classmethod
    def from_store(cls, ann: AnnotationSet, store: dict[str, np.ndarray]) -> GroundingDataset:
        """In-memory counterpart of ``from_annotations``; features are widened like on load."""
        return cls._build(ann, lambda ref: np.asarray(store[ref], dtype=np.float64))

    @classmethod
    def _build(cls, ann: AnnotationSet, feat) -> GroundingDataset:
        samples, by_video = [], {}
        for q in ann.queries:
            v = ann.videos[q.video_id]
            samples.append(
                Sample(
                    q.qid, q.video_id, feat(v.feature_ref), feat(q.feature_ref),
                    np.asarray(q.sentence_embedding, dtype=np.float64), q.span, v.duration, v.frame_stride,
                )
            )
            by_video.setdefault(q.video_id, []).append(len(samples) - 1)
        return cls(samples, by_video)

    @classmethod
    def load(cls, path, cache: dict | None = None) -> GroundingDataset:
        path = Path(path)
        return cls.from_annotations(load_annotations(path), path.parent, cache)


def batch_iterator(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True) -> Iterator[np.ndarray]:
    """Index batches covering range(n) once; the last batch may be short."""
    if batch_size < 1:
        raise ContractError(f"batch size must be positive, got {batch_size}")
    order = rng.permutation(n) if shuffle else np.arange(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


# -- synthetic generator -------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_videos: int = 500
    frames: int = 40
    feature_dim: int = 32
    text_dim: int = 32
    vocab_size: int = 20
    events_min: int = 2
    events_max: int = 4
    event_len_min: int = 4
    event_len_max: int = 10
    noise: float = 0.3
    ambiguity: float = 0.3
    distractor_len_min: int = 2
    distractor_len_max: int = 4
    distractor_mix: float = 1.0
    clutter: float = 1.0
    clutter_len_min: int = 2
    clutter_len_max: int = 6
    paraphrase_rate: float = 0.0
    position_bias: float = 0.0
    frame_stride: float = 1.0
    tokens_min: int = 3
    tokens_max: int = 6
    token_noise: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        def need(cond: bool, name: str, msg: str):
            if not cond:
                raise GenerationError(f"{name}: {msg}")

        need(self.num_videos >= 1, "num_videos", "must be at least 1")
        need(self.frames >= 2, "frames", "must be at least 2")
        need(self.feature_dim >= 1 and self.text_dim >= 1, "feature_dim", "dimensions must be positive")
        need(1 <= self.events_min <= self.events_max, "events_min", "need 1 <= events_min <= events_max")
        need(1 <= self.event_len_min <= self.event_len_max, "event_len_min", "need 1 <= event_len_min <= event_len_max")
        need(self.event_len_max < self.frames, "event_len_max", f"event length {self.event_len_max} must be < frames {self.frames}")
        need(self.vocab_size >= self.events_max, "vocab_size", f"vocabulary {self.vocab_size} smaller than events_max {self.events_max}")
        need(self.events_min * self.event_len_min <= self.frames, "events_min", "minimum events cannot fit in the video")
        need(self.noise >= 0 and self.token_noise >= 0, "noise", "must be non-negative")
        for name in ("ambiguity", "paraphrase_rate", "position_bias", "distractor_mix", "clutter"):
            need(0.0 <= getattr(self, name) <= 1.0, name, "must lie in [0, 1]")
        need(1 <= self.distractor_len_min <= self.distractor_len_max, "distractor_len_min", "need 1 <= min <= max")
        need(1 <= self.clutter_len_min <= self.clutter_len_max, "clutter_len_min", "need 1 <= min <= max")
        need(self.clutter == 0.0 or self.vocab_size > self.events_max, "clutter", "needs concepts outside each video's events (vocab_size > events_max)")
        need(1 <= self.tokens_min <= self.tokens_max, "tokens_min", "need 1 <= tokens_min <= tokens_max")
        need(self.frame_stride > 0, "frame_stride", "must be positive")
        need(0.0 <= self.test_fraction < 1.0, "test_fraction", "must lie in [0, 1)")


@dataclass
class SyntheticWorld:
    """Latent tables behind a synthetic dataset, kept for oracles and analysis."""

    video_concepts: np.ndarray  # (vocab + 1, feature_dim); last row is background
    text_concepts: np.ndarray  # (vocab, text_dim)
    sentence_concepts: np.ndarray  # (vocab, text_dim)
    filler_tokens: np.ndarray
    frame_labels: dict[str, np.ndarray]  # per video, event concept id per frame (-1 outside every annotated event)
    query_concepts: dict[str, int]


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _place_events(spec: SyntheticSpec, rng: np.random.Generator, lengths: np.ndarray, centers: np.ndarray | None) -> list[int]:
    """Non-overlapping start frames for the given event lengths (in the given order)."""
    L = spec.frames
    free = L - int(lengths.sum())
    if free < 0:
        raise GenerationError(f"events of total length {int(lengths.sum())} do not fit in {L} frames")
    if centers is None:
        gaps = rng.multinomial(free, np.ones(len(lengths) + 1) / (len(lengths) + 1))
        starts, t = [], 0
        for gap, ln in zip(gaps[:-1], lengths):
            t += int(gap)
            starts.append(t)
            t += int(ln)
        return starts
    starts, t = [], 0
    for i, (ln, c) in enumerate(zip(lengths, centers)):
        remaining = int(lengths[i + 1 :].sum())
        want = int(round(c * L - ln / 2.0))
        s = min(max(want, t), L - remaining - int(ln))
        starts.append(s)
        t = s + int(ln)
    return starts


def generate_synthetic(spec: SyntheticSpec) -> tuple[AnnotationSet, dict[str, np.ndarray], SyntheticWorld]:
    """Build videos as sequences of latent concept segments plus grounded queries.

    Returns the annotations (feature refs relative to a dataset root), a
    feature store mapping those refs to float32 matrices, and the latent tables.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    V = spec.vocab_size
    video_concepts = _unit_rows(rng, V + 1, spec.feature_dim) * math.sqrt(spec.feature_dim) / 2.0
    text_concepts = _unit_rows(rng, V, spec.text_dim)
    sentence_concepts = _unit_rows(rng, V, spec.text_dim)
    filler = _unit_rows(rng, 4, spec.text_dim)
    canonical = (rng.permutation(V) + 0.5) / V

    ann = AnnotationSet()
    store: dict[str, np.ndarray] = {}
    frame_labels: dict[str, np.ndarray] = {}
    query_concepts: dict[str, int] = {}
    L = spec.frames
    duration = L * spec.frame_stride

    for vi in range(spec.num_videos):
        vid = f"v{vi:05d}"
        k = int(rng.integers(spec.events_min, spec.events_max + 1))
        for _ in range(100):
            lengths = rng.integers(spec.event_len_min, spec.event_len_max + 1, size=k)
            if lengths.sum() <= L:
                break
        else:
            raise GenerationError(f"could not pack {k} events into {L} frames")
        concepts = rng.choice(V, size=k, replace=False)
        centers = None
        if spec.position_bias > 0:
            jitter = rng.normal(0.0, 0.35 * (1.0 - spec.position_bias) + 0.03, size=k)
            centers = np.clip(canonical[concepts] + jitter, 0.0, 1.0)
            order = np.argsort(centers)
            concepts, lengths, centers = concepts[order], lengths[order], centers[order]
        else:
            order = rng.permutation(k)
            concepts, lengths = concepts[order], lengths[order]
        starts = _place_events(spec, rng, lengths, centers)

        labels = np.full(L, -1, dtype=np.int64)
        for c, s, ln in zip(concepts, starts, lengths):
            labels[s : s + ln] = c
        mix = np.zeros((L, V + 1))
        mix[labels < 0, V] = 1.0
        mix[labels >= 0, labels[labels >= 0]] = 1.0

        # weak-alignment distractors: the concept also shows up in background frames
        for c in concepts:
            if rng.random() >= spec.ambiguity:
                continue
            dl = int(rng.integers(spec.distractor_len_min, spec.distractor_len_max + 1))
            bg = labels < 0
            runs = [s for s in range(L - dl + 1) if bg[s : s + dl].all()]
            if not runs:
                continue
            s = runs[int(rng.integers(len(runs)))]
            labels[s : s + dl] = -2  # reserved so distractors do not overlap
            mix[s : s + dl, :] = 0.0
            mix[s : s + dl, c] = spec.distractor_mix
            mix[s : s + dl, V] = 1.0 - spec.distractor_mix
        # unannotated activity: remaining background runs show concepts nobody asks about here
        if spec.clutter > 0:
            others = np.setdiff1d(np.arange(V), concepts)
            t = 0
            while t < L:
                if labels[t] != -1:
                    t += 1
                    continue
                ln = int(rng.integers(spec.clutter_len_min, spec.clutter_len_max + 1))
                stop = t
                while stop < min(L, t + ln) and labels[stop] == -1:
                    stop += 1
                if rng.random() < spec.clutter:
                    mix[t:stop, :] = 0.0
                    mix[t:stop, int(rng.choice(others))] = 1.0
                t = stop
        feats = mix @ video_concepts + rng.normal(0.0, spec.noise, size=(L, spec.feature_dim))
        labels[labels == -2] = -1

        vref = f"features/video/{vid}.bmft"
        store[vref] = feats.astype(np.float32)
        ann.videos[vid] = VideoRecord(vid, duration, vref, spec.frame_stride)
        frame_labels[vid] = labels

        qn = 0
        for c, s, ln in zip(concepts, starts, lengths):
            variants = [(s, s + ln)]
            if rng.random() < spec.paraphrase_rate:
                lo = int(np.clip(s + rng.integers(-1, 2), 0, s + ln - 1))
                hi = int(np.clip(s + ln + rng.integers(-1, 2), lo + 1, L))
                variants.append((lo, hi))
            for lo, hi in variants:
                qid = f"{vid}_q{qn}"
                qn += 1
                n_tok = int(rng.integers(spec.tokens_min, spec.tokens_max + 1))
                toks = filler[rng.integers(0, len(filler), size=n_tok)].copy()
                toks[int(rng.integers(n_tok))] = text_concepts[c]
                toks += rng.normal(0.0, spec.token_noise, size=toks.shape)
                sent = sentence_concepts[c] + rng.normal(0.0, 0.05, size=spec.text_dim)
                qref = f"features/text/{qid}.bmft"
                store[qref] = toks.astype(np.float32)
                ann.queries.append(
                    QueryAnnotation(
                        qid, vid, lo * spec.frame_stride, hi * spec.frame_stride, qref,
                        [float(x) for x in sent.astype(np.float32)], f"concept {int(c)}",
                    )
                )
                query_concepts[qid] = int(c)

    world = SyntheticWorld(video_concepts, text_concepts, sentence_concepts, filler, frame_labels, query_concepts)
    return ann, store, world


def split_by_video(ann: AnnotationSet, test_fraction: float, seed: int) -> tuple[AnnotationSet, AnnotationSet]:
    vids = list(ann.videos)
    rng = np.random.default_rng(seed)
    n_test = int(round(len(vids) * test_fraction))
    test_vids = set(rng.permutation(vids)[:n_test].tolist())
    train_q = [q.qid for q in ann.queries if q.video_id not in test_vids]
    test_q = [q.qid for q in ann.queries if q.video_id in test_vids]
    return ann.subset(train_q), ann.subset(test_q)


@dataclass
class OODReport:
    train_mean_center: float
    test_mean_center: float

    @property
    def shift(self) -> float:
        return self.test_mean_center - self.train_mean_center


def make_ood_split(ann: AnnotationSet, threshold: float = 0.6) -> tuple[AnnotationSet, AnnotationSet, OODReport]:
    """Queries whose normalized GT center is below ``threshold`` train; the rest form the shifted test split."""
    centers = {}
    for q in ann.queries:
        d = ann.videos[q.video_id].duration
        centers[q.qid] = (q.start + q.end) / 2.0 / d
    train = [qid for qid, c in centers.items() if c < threshold or threshold >= 1.0]
    test = [qid for qid, c in centers.items() if not (c < threshold or threshold >= 1.0)]
    if not train or (threshold < 1.0 and not test):
        raise ValidationError(f"OOD threshold {threshold} leaves an empty split")
    tr_mean = float(np.mean([centers[q] for q in train]))
    te_mean = float(np.mean([centers[q] for q in test])) if test else float("nan")
    return ann.subset(train), ann.subset(test), OODReport(tr_mean, te_mean)


def write_dataset(root, ann: AnnotationSet, store: dict[str, np.ndarray], splits: dict[str, AnnotationSet]) -> None:
    root = Path(root)
    for ref, mat in store.items():
        write_features(root / ref, mat)
    save_annotations(root / "all.jsonl", ann)
    for name, part in splits.items():
        save_annotations(root / f"{name}.jsonl", part)


def synthesize_to_disk(spec: SyntheticSpec, root, ood_threshold: float | None = None) -> dict[str, AnnotationSet]:
    ann, store, _ = generate_synthetic(spec)
    train, test = split_by_video(ann, spec.test_fraction, spec.seed)
    splits = {"train": train, "test": test}
    if ood_threshold is not None:
        ood_train, ood_test, _ = make_ood_split(ann, ood_threshold)
        splits["ood_train"], splits["ood_test"] = ood_train, ood_test
    write_dataset(root, ann, store, splits)
    Path(root, "synth_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return splits
