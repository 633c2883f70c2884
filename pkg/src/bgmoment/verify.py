"""Self-check suites: gradient checks, matching and metric oracles, span geometry.

Each suite returns a :class:`SuiteResult`; ``run_all`` drives them for the
``verify`` command.  Mutations swap a library function for a deliberately
broken one so the suites can be shown to catch the defect.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .metrics import average_precision, recall_at
from .temporal import giou_matrix, iou_matrix
from .training import (
    FrameIndexSets,
    LossWeights,
    class_loss,
    frame_prob_loss,
    hungarian_assign,
    margin_loss,
    moment_loss,
    semantic_alignment_loss,
    total_loss,
)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    failures: list[str] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


# -- oracles ----------------------------------------------------------------------------------


def brute_force_assignment(costs: np.ndarray) -> float:
    """Minimum total cost over every injection of GT rows into prediction columns."""
    n, m = costs.shape
    if n > m:
        return brute_force_assignment(costs.T)
    best = np.inf
    for cols in itertools.permutations(range(m), n):
        best = min(best, float(costs[np.arange(n), list(cols)].sum()))
    return best


def brute_force_ap(threshold: float, ranked: np.ndarray, gts: np.ndarray) -> float:
    """AP from explicit precision/recall at every ranking prefix."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    ranked = np.asarray(ranked, dtype=np.float64).reshape(-1, 2)
    prec, rec = [], []
    for k in range(1, len(ranked) + 1):
        used = set()
        tp = 0
        for p in ranked[:k]:
            best, best_j = -1.0, None
            for j, g in enumerate(gts):
                if j in used:
                    continue
                inter = max(0.0, min(p[1], g[1]) - max(p[0], g[0]))
                union = (p[1] - p[0]) + (g[1] - g[0]) - inter
                v = inter / union if union > 0 else 0.0
                if v >= threshold and v > best:
                    best, best_j = v, j
            if best_j is not None:
                used.add(best_j)
                tp += 1
        prec.append(tp / k)
        rec.append(tp / len(gts))
    ap, last = 0.0, 0.0
    for k in range(len(rec)):
        if rec[k] > last:
            ap += (rec[k] - last) * max(prec[k:])
            last = rec[k]
    return ap


# -- gradient checks ------------------------------------------------------------------------------


def _far_from(values: np.ndarray, margin: float) -> bool:
    return bool(np.all(np.abs(values) > margin))


def _random_spans(rng, n):
    s = rng.uniform(0.0, 0.8, size=n)
    return np.stack([s, s + rng.uniform(0.05, 0.2, size=n)], axis=1)


def _moment_case(rng, w):
    gt = _random_spans(rng, 4)
    while True:
        pred = gt + rng.normal(0.0, 0.1, size=gt.shape)
        pred[:, 1] = np.maximum(pred[:, 1], pred[:, 0] + 0.02)
        diffs = np.concatenate([(pred - gt).ravel(), (pred[:, 1] - gt[:, 0]), (pred[:, 0] - gt[:, 1])])
        if _far_from(diffs, 1e-3):
            return (lambda x: moment_loss(x, gt, w)), pred


def _class_case(rng, w):
    logits = rng.normal(size=(3, 5, 2))
    matched = rng.integers(0, 5, size=3)
    return (lambda x: class_loss(x, matched, w)), logits


def _margin_case(rng, w):
    L, d = 8, 4
    W = ad.Tensor(rng.normal(size=(d, 1)))
    sets = [FrameIndexSets(np.arange(2, 5), np.array([0, 1, 5, 6, 7])), FrameIndexSets(np.arange(0, 3), np.arange(3, 8))]
    while True:
        frames = rng.normal(size=(2, L, d))
        s = (frames @ W.data)[..., 0]
        gaps = [w.delta + s[b][None, st.back] - s[b][st.fore, None] for b, st in enumerate(sets)]
        if _far_from(np.concatenate([g.ravel() for g in gaps]), 1e-3):
            return (lambda x: margin_loss(x, sets, W, w.delta)), frames


def _prob_case(rng, w):
    sets = [FrameIndexSets(np.arange(2, 5), np.array([0, 1, 5, 6])), FrameIndexSets(np.array([0]), np.arange(1, 7))]
    p_neg = rng.uniform(0.0, 1.0, size=(2, 7))
    logits = rng.normal(size=(2, 7))

    def f(x):
        p_pos = ad.sigmoid(x)
        return frame_prob_loss(p_pos * (1.0 - p_neg), sets)

    return f, logits


def _semantic_case(rng, w):
    q = rng.normal(size=(4, 6))
    return (lambda x: semantic_alignment_loss(x, ad.Tensor(q), w.tau)), rng.normal(size=(4, 6))


def _total_case(rng, w):
    parts = rng.uniform(0.1, 2.0, size=5)

    def f(x):
        comps = [x[i] * parts[i] for i in range(5)]
        return total_loss(comps[0], comps[1], comps[2], comps[3], comps[4], w).total

    return f, rng.normal(size=5)


GRAD_CASES: dict[str, Callable] = {
    "moment": _moment_case,
    "margin": _margin_case,
    "probability": _prob_case,
    "semantic": _semantic_case,
    "total": _total_case,
    "class": _class_case,
}


def grad_suite(trials: int = 100, seed: int = 0, tol: float = 1e-4) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    w = LossWeights()
    worst: dict[str, float] = {}
    failures = []
    for name, make in GRAD_CASES.items():
        errs = []
        for _ in range(trials):
            f, x = make(rng, w)
            errs.append(ad.grad_check(f, x, 1e-6))
        worst[name] = max(errs)
        if worst[name] >= tol:
            failures.append(f"gradient of {name} loss: max relative error {worst[name]:.2e} >= {tol:g}")
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    return SuiteResult("gradient-check", not failures, detail, time.perf_counter() - t0, failures)


def hungarian_suite(cases: int = 1000, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(cases):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(n, 7))
        costs = rng.normal(size=(n, m))
        got = hungarian_assign(costs)
        rows = {r for r, _ in got.pairs}
        cols = {c for _, c in got.pairs}
        ok = len(rows) == len(cols) == len(got.pairs) == min(n, m)
        if not ok or abs(got.total_cost - brute_force_assignment(costs)) > 1e-9:
            bad += 1
    failures = [f"hungarian assignment differs from exhaustive search on {bad} of {cases} matrices"] if bad else []
    return SuiteResult("hungarian-oracle", not bad, f"{cases} matrices, {bad} discrepancies", time.perf_counter() - t0, failures)


def geometry_suite(pairs: int = 100_000, seed: int = 0, giou_fn=giou_matrix, iou_fn=iou_matrix) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    a = np.sort(rng.uniform(-1.0, 2.0, size=(pairs, 2)), axis=1)
    b = np.sort(rng.uniform(-1.0, 2.0, size=(pairs, 2)), axis=1)
    a[:, 1] = np.maximum(a[:, 1], a[:, 0] + 1e-6)
    iou_ab = _pairwise(iou_fn, a, b)
    iou_ba = _pairwise(iou_fn, b, a)
    giou_ab = _pairwise(giou_fn, a, b)
    giou_ba = _pairwise(giou_fn, b, a)
    checks = {
        "iou in [0, 1]": np.all((iou_ab >= 0) & (iou_ab <= 1)),
        "iou symmetric": np.allclose(iou_ab, iou_ba, rtol=0, atol=1e-12),
        "giou <= iou": np.all(giou_ab <= iou_ab + 1e-12),
        "giou in (-1, 1]": np.all((giou_ab > -1) & (giou_ab <= 1 + 1e-12)),
        "giou symmetric": np.allclose(giou_ab, giou_ba, rtol=0, atol=1e-12),
        "iou([0,0.5],[0.25,0.75]) == 1/3": abs(iou_fn(np.array([0, 0.5]), np.array([0.25, 0.75]))[0, 0] - 1 / 3) <= 1e-12,
        "giou([0,1],[2,3]) == -1/3": abs(giou_fn(np.array([0.0, 1.0]), np.array([2.0, 3.0]))[0, 0] + 1 / 3) <= 1e-12,
        "giou([0,1],[1,2]) == 0": abs(giou_fn(np.array([0.0, 1.0]), np.array([1.0, 2.0]))[0, 0]) <= 1e-12,
    }
    failures = [f"geometry property violated: {k}" for k, ok in checks.items() if not ok]
    detail = f"{pairs} span pairs, {len(checks) - len(failures)}/{len(checks)} properties hold"
    return SuiteResult("geometry", not failures, detail, time.perf_counter() - t0, failures)


def _pairwise(fn, a, b):
    """Row-aligned values fn(a[i], b[i]) using block-diagonal extraction."""
    out = np.empty(len(a))
    step = 100
    for lo in range(0, len(a), step):
        m = fn(a[lo : lo + step], b[lo : lo + step])
        out[lo : lo + step] = np.diagonal(m)
    return out


def metric_suite(cases: int = 1000, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad_ap = bad_mono = 0
    ranked_all, gts_all = [], []
    for _ in range(cases):
        k = int(rng.integers(1, 9))
        g = int(rng.integers(1, 3))
        preds = _random_spans(rng, k)
        gts = _random_spans(rng, g)
        # snap some predictions onto the GT so hits are common
        hit = rng.random(k) < 0.3
        preds[hit] = gts[rng.integers(0, g, size=int(hit.sum()))] + rng.normal(0, 0.02, size=(int(hit.sum()), 2))
        preds = np.sort(preds, axis=1)
        for t in (0.3, 0.5, 0.7):
            if abs(average_precision(t, preds, gts) - brute_force_ap(t, preds, gts)) > 1e-12:
                bad_ap += 1
        ranked_all.append(preds)
        gts_all.append(gts[:1])
    for n in range(1, 8):
        for t in (0.3, 0.5, 0.7):
            if recall_at(n, t, ranked_all, gts_all) > recall_at(n + 1, t, ranked_all, gts_all) + 1e-15:
                bad_mono += 1
            if recall_at(n, t + 0.1, ranked_all, gts_all) > recall_at(n, t, ranked_all, gts_all) + 1e-15:
                bad_mono += 1
    failures = []
    if bad_ap:
        failures.append(f"average precision differs from brute-force PR on {bad_ap} checks")
    if bad_mono:
        failures.append(f"recall monotonicity violated {bad_mono} times")
    detail = f"{cases} instances, AP mismatches={bad_ap}, monotonicity violations={bad_mono}"
    return SuiteResult("metric-oracle", not failures, detail, time.perf_counter() - t0, failures)


def _negated_giou(a, b):
    return -giou_matrix(a, b)


MUTATIONS = {"giou-sign": {"giou_fn": _negated_giou}}


def run_all(quick: bool = False, seed: int = 0, mutation: str | None = None) -> list[SuiteResult]:
    geo_kwargs = MUTATIONS[mutation] if mutation else {}
    scale = 10 if quick else 1
    return [
        grad_suite(trials=100 // scale, seed=seed),
        hungarian_suite(cases=1000 // scale, seed=seed),
        geometry_suite(pairs=100_000 // scale, seed=seed, **geo_kwargs),
        metric_suite(cases=1000 // scale, seed=seed),
    ]
