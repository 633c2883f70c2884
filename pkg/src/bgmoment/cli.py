"""Command-line entry point: synth, train, eval, ablate, verify.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .config import OUTPUT_ENV, RunConfig, default_output_dir, dump_config, load_config
from .data import GroundingDataset, SyntheticSpec, synthesize_to_disk
from .errors import BgMomentError, ConfigError, GenerationError
from .metrics import EvalResult
from .model import ModelConfig, MomentDetector
from .training import Trainer, evaluate

log = logging.getLogger("bgmoment")

ABLATIONS = {
    "no-negative": {"train.use_negatives": False},
    "no-shift": {"train.use_shift": False},
    "no-sampling-strategy": {"train.sampling_strategy": False},
}
# the sampling filter only acts on negatives, so removing both is not a meaningful ablation
CONFLICTS = [{"no-negative", "no-sampling-strategy"}]


class UsageError(BgMomentError):
    pass


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _parse_sets(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _parse_value(value)
    return out


def ablation_overrides(names: list[str] | None, explicit: dict) -> dict:
    names = list(dict.fromkeys(names or []))
    chosen = set(names)
    for bad in CONFLICTS:
        if bad <= chosen:
            raise UsageError(f"conflicting ablations: {' + '.join(sorted(bad))}")
    out = {}
    for name in names:
        for key, value in ABLATIONS[name].items():
            if key in explicit and explicit[key] != value:
                raise UsageError(f"--ablate {name} conflicts with --set {key}={explicit[key]}")
            out[key] = value
    return out


def _write_lines(path: Path, lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines))


# -- model persistence ------------------------------------------------------------------------


def save_run_checkpoint(path, trainer: Trainer, cfg: RunConfig, epoch: int) -> None:
    tensors = {name: p.data for name, p in trainer.named_parameters()}
    meta = {"model": trainer.model.cfg.to_dict(), "epoch": epoch, "seed": cfg.seed}
    save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[MomentDetector, dict]:
    tensors, meta = load_checkpoint(path)
    try:
        mcfg = ModelConfig(**meta["model"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: checkpoint metadata lacks a usable model config ({exc})") from None
    model = MomentDetector(mcfg)
    params = dict(model.named_parameters())
    for name, p in params.items():
        if name not in tensors:
            raise ConfigError(f"{path}: checkpoint has no tensor {name}")
        if tensors[name].shape != p.data.shape:
            raise ConfigError(f"{path}: tensor {name} has shape {tensors[name].shape}, model expects {p.data.shape}")
        p.data = tensors[name].copy()
    return model, meta


def _load_split(cfg: RunConfig, split: str, cache: dict) -> GroundingDataset:
    path = Path(cfg.data.root) / f"{split}.jsonl"
    if not path.exists():
        raise ConfigError(f"dataset split not found: {path}")
    data = GroundingDataset.load(path, cache)
    if len(data) == 0:
        raise ConfigError(f"dataset split {path} has no queries")
    return data


def _check_dims(model_cfg: ModelConfig, data: GroundingDataset) -> None:
    if model_cfg.d_video != data.d_video:
        raise ConfigError(f"video feature width mismatch: model d_video={model_cfg.d_video}, data has {data.d_video}")
    if model_cfg.d_text != data.d_text:
        raise ConfigError(f"text feature width mismatch: model d_text={model_cfg.d_text}, data has {data.d_text}")


# -- commands -----------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    values = {}
    if args.spec:
        tree = yaml.safe_load(Path(args.spec).read_text()) or {}
        if not isinstance(tree, dict):
            raise ConfigError(f"{args.spec}: spec file must be a mapping")
        values.update(tree)
    values.update(_parse_sets(args.set))
    for flag in ("seed", "num_videos", "frames", "ambiguity"):
        v = getattr(args, flag)
        if v is not None:
            values[flag] = v
    known = {f.name for f in fields(SyntheticSpec)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown synthetic spec key(s): {', '.join(unknown)}")
    spec = SyntheticSpec(**values)
    try:
        spec.validate()
    except GenerationError as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    out = Path(args.out)
    splits = synthesize_to_disk(spec, out, args.ood_threshold)
    for name, part in splits.items():
        print(f"split={name} videos={len(part.videos)} queries={len(part.queries)}")
    print(f"dataset={out}")
    return 0


def build_run_config(args) -> RunConfig:
    explicit = _parse_sets(args.set)
    overrides = dict(explicit)
    overrides.update(ablation_overrides(args.ablate, explicit))
    if args.data:
        overrides["data.root"] = args.data
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["output_dir"] = args.out
    return load_config(args.config, overrides)


def run_training(cfg: RunConfig, out: Path, quiet: bool = False) -> tuple[Trainer, list[str], EvalResult | None]:
    """Train per ``cfg``; returns the trainer, the log lines, and the best eval result."""
    cache: dict = {}
    train = _load_split(cfg, cfg.data.train_split, cache)
    val = _load_split(cfg, cfg.data.eval_split, cache) if cfg.data.eval_split else None
    # input widths are a property of the features on disk
    mcfg = replace(cfg.model, d_video=train.d_video, d_text=train.d_text)
    if val is not None:
        _check_dims(mcfg, val)
    model = MomentDetector(mcfg)
    trainer = Trainer(model, cfg.train, cfg.loss)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    ckdir = out / "checkpoints"
    save_run_checkpoint(ckdir / "epoch0000.bmck", trainer, cfg, 0)
    lines: list[str] = []
    best: EvalResult | None = None
    best_epoch = 0
    history: dict[str, list[float]] = {"total": [], "R1@0.50": []}
    log_path = out / "train.log"
    log_path.write_text("")
    for _ in range(cfg.train.epochs):
        stats = trainer.train_epoch(train)
        line = stats.line()
        history["total"].append(stats.losses["total"])
        e = trainer.epoch
        if val is not None and cfg.train.eval_every and e % cfg.train.eval_every == 0:
            res, _ = evaluate(model, val)
            line += f" val_R1@0.50={res.r1(0.5):.4f} val_R1@0.70={res.r1(0.7):.4f} val_gap={res.gap:.4f}"
            history["R1@0.50"].append(res.r1(0.5))
            if best is None or res.r1(0.5) > best.r1(0.5):
                best, best_epoch = res, e
                save_run_checkpoint(ckdir / "best.bmck", trainer, cfg, e)
        if cfg.train.checkpoint_every and e % cfg.train.checkpoint_every == 0:
            save_run_checkpoint(ckdir / f"epoch{e:04d}.bmck", trainer, cfg, e)
        lines.append(line)
        with open(log_path, "a") as fh:
            fh.write(line + "\n")
        if not quiet:
            print(line, flush=True)
        log.info("epoch %d took %.1fs", e, stats.seconds)
    if cfg.train.epochs:
        save_run_checkpoint(ckdir / "final.bmck", trainer, cfg, trainer.epoch)
    if best is not None:
        tail = f"best_val_R1@0.50={best.r1(0.5):.4f} best_epoch={best_epoch}"
        lines.append(tail)
        with open(log_path, "a") as fh:
            fh.write(tail + "\n")
        if history["R1@0.50"]:
            from .plotting import plot_history

            step = cfg.train.eval_every
            plot_history(out / "figures" / "val_recall.png", list(range(step, cfg.train.epochs + 1, step)), {"R1@0.50": history["R1@0.50"]}, "R1@0.50")
    return trainer, lines, best


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    out = Path(cfg.output_dir)
    _, lines, best = run_training(cfg, out)
    if best is not None:
        print(lines[-1])
    print(f"output={out}")
    return 0


def write_eval_outputs(out: Path, res: EvalResult, results, dump_attention: bool, figures: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_lines(out / "report.txt", res.lines())
    preds = []
    for r in results:
        order = np.argsort(-r.scores, kind="stable")
        preds.append(json.dumps({
            "qid": r.qid, "gt": r.gt.tolist(),
            "scores": r.scores[order].tolist(), "spans": r.spans[order].tolist(),
        }))
    _write_lines(out / "predictions.jsonl", preds)
    if dump_attention:
        rows = [json.dumps({"qid": r.qid, "o": r.attention.tolist(), "p_joint": r.p_joint.tolist()}) for r in results]
        _write_lines(out / "attention.jsonl", rows)
    if figures:
        from .plotting import plot_alignment, plot_frame_scores

        for r in results[:figures]:
            top = r.ranked()[0]
            plot_frame_scores(out / "figures" / f"attention_{r.qid}.png", r.p_joint, r.attention, r.gt, top, r.qid)
        plot_alignment(out / "figures" / "alignment.png", {"model": res.gt_mean}, {"model": res.non_gt_mean})


def cmd_eval(args) -> int:
    model, meta = load_model(args.checkpoint)
    root = Path(args.data)
    path = root / f"{args.split}.jsonl"
    if not path.exists():
        raise ConfigError(f"dataset split not found: {path}")
    data = GroundingDataset.load(path)
    if len(data) == 0:
        raise ConfigError(f"dataset split {path} has no queries")
    _check_dims(model.cfg, data)
    res, results = evaluate(model, data)
    out = Path(args.out or Path(default_output_dir()) / "eval")
    write_eval_outputs(out, res, results, args.dump_attention, args.figures)
    for line in res.lines():
        print(line)
    print(f"report={out / 'report.json'}")
    return 0


def cmd_ablate(args) -> int:
    """Train the full model and each requested ablation with identical seeds; compare."""
    base_args = argparse.Namespace(**{**vars(args), "ablate": None})
    base = build_run_config(base_args)
    root = Path(base.output_dir)
    variants = ["full"] + list(dict.fromkeys(args.variants or list(ABLATIONS)))
    summary = {}
    for name in variants:
        ov = {} if name == "full" else ablation_overrides([name], _parse_sets(args.set))
        cfg = load_config(args.config, {**_flatten(base), **ov})
        trainer, _, _ = run_training(cfg, root / name, quiet=True)
        cache: dict = {}
        res, _ = evaluate(trainer.model, _load_split(cfg, cfg.data.eval_split, cache))
        summary[name] = res
        print(f"variant={name} " + " ".join(res.lines()), flush=True)
    (root / "ablation.json").write_text(json.dumps({k: v.to_dict() for k, v in summary.items()}, indent=2, sort_keys=True) + "\n")
    from .plotting import plot_alignment

    plot_alignment(root / "figures" / "alignment.png", {k: v.gt_mean for k, v in summary.items()}, {k: v.non_gt_mean for k, v in summary.items()})
    return 0


def _flatten(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "output_dir": cfg.output_dir}
    for section in ("model", "loss", "train", "data"):
        for k, v in asdict(getattr(cfg, section)).items():
            out[f"{section}.{k}"] = v
    return out


def cmd_verify(args) -> int:
    from .verify import run_all

    t0 = time.perf_counter()
    results = run_all(quick=args.quick, seed=args.seed or 0, mutation=args.mutate)
    ok = True
    for r in results:
        print(r.line())
        for f in r.failures:
            print(f"  {f}")
        ok &= r.passed
    print(f"verify={'ok' if ok else 'failed'} seconds={time.perf_counter() - t0:.1f}")
    return 0 if ok else 1


# -- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bgmoment", description="Background-aware moment detection on grounded video features.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic grounded-video dataset")
    s.add_argument("--out", required=True, help="dataset directory to create")
    s.add_argument("--spec", help="YAML file of synthetic spec fields")
    s.add_argument("--set", action="append", metavar="FIELD=VALUE", help="override one spec field (repeatable)")
    s.add_argument("--seed", type=int, help="generator seed")
    s.add_argument("--num-videos", type=int, help="number of videos")
    s.add_argument("--frames", type=int, help="frames per video")
    s.add_argument("--ambiguity", type=float, help="probability an event concept also appears in the background")
    s.add_argument("--ood-threshold", type=float, help="also write ood_train/ood_test split at this GT-center quantile")
    s.set_defaults(func=cmd_synth)

    def run_flags(q):
        q.add_argument("--data", help="dataset directory (overrides data.root)")
        q.add_argument("--config", help="YAML run config")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.lr=1e-3 (repeatable)")
        q.add_argument("--seed", type=int, help="run seed")
        q.add_argument("--out", help=f"output directory (default from ${OUTPUT_ENV} or ./runs)")

    t = sub.add_parser("train", help="train a model")
    run_flags(t)
    t.add_argument("--epochs", type=int, help="number of epochs; 0 writes the initial checkpoint only")
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), help="disable one component (repeatable)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train the full model and ablations with identical seeds")
    run_flags(a)
    a.add_argument("--epochs", type=int, help="epochs per variant")
    a.add_argument("--variants", nargs="+", choices=sorted(ABLATIONS), help="ablations to compare against the full model")
    a.set_defaults(func=cmd_ablate, ablate=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="test", help="split name (default test)")
    e.add_argument("--out", help=f"report directory (default ${OUTPUT_ENV}/eval)")
    e.add_argument("--dump-attention", action="store_true", help="write per-query attention o and p to attention.jsonl")
    e.add_argument("--figures", type=int, default=4, help="number of per-query attention figures (0 disables)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the gradient, matching, geometry and metric self-checks")
    v.add_argument("--quick", action="store_true", help="smaller sample sizes")
    v.add_argument("--seed", type=int, help="suite seed")
    v.add_argument("--mutate", choices=["giou-sign"], help="inject a known defect to show the suites catch it")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (BgMomentError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
