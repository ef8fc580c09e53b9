"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .data_model import (
    BundleFormatError,
    DatasetManifest,
    ManifestError,
    factor_distribution,
    mix_augment,
    read_bundle,
    start_frame_stats,
)
from .evaluation import AnticipationResult, evaluate, export_report, smooth
from .network import ModelConfig, accident_probs
from .synthetic import RejectionCapExceeded, ScenarioParams, gen_dataset
from .training import CheckpointError, DivergenceError, TrainConfig, load_checkpoint, train

log = logging.getLogger("accident_anticipation")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
CONFIG_SECTIONS = {"data", "model", "train", "eval", "output", "seed"}
DATA_KEYS = {"manifest", "split"}
EVAL_KEYS = {"split", "sigma"}
OUTPUT_KEYS = {"dir"}


class UsageError(Exception):
    pass


def load_run_config(path: str | Path) -> dict:
    """Parse and default a JSON run config; unknown keys are rejected."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(raw) - CONFIG_SECTIONS
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    for section, allowed in (("data", DATA_KEYS), ("eval", EVAL_KEYS), ("output", OUTPUT_KEYS)):
        extra = set(raw.get(section, {})) - allowed
        if extra:
            raise UsageError(f"unknown keys in {section!r}: {sorted(extra)}")
    seed = raw.get("seed", 0)
    data = {"split": "train", **raw.get("data", {})}
    if "manifest" not in data:
        raise UsageError("config needs data.manifest")
    manifest = Path(data["manifest"])
    if not manifest.is_absolute():
        manifest = path.parent / manifest
    data["manifest"] = manifest
    output = {"dir": "run", **raw.get("output", {})}
    out_dir = Path(output["dir"])
    output["dir"] = out_dir if out_dir.is_absolute() else path.parent / out_dir
    try:
        model = ModelConfig.from_json({"seed": seed, **raw.get("model", {})})
        tc = {"seed": seed, "checkpoint_dir": str(output["dir"] / "checkpoints"), **raw.get("train", {})}
        train_cfg = TrainConfig.from_json(tc)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return {
        "data": data,
        "model": model,
        "train": train_cfg,
        "eval": {"split": "test", "sigma": 2.0, **raw.get("eval", {})},
        "output": output,
        "seed": seed,
    }


def _load_manifest(path) -> DatasetManifest:
    try:
        return DatasetManifest.load(path)
    except (OSError, ManifestError, KeyError) as exc:
        raise UsageError(f"cannot load manifest {path}: {exc}") from exc


def cmd_gen_synth(args) -> int:
    if args.n_pos < 0 or args.n_neg < 0 or args.n_pos + args.n_neg == 0:
        raise UsageError("need non-negative counts with at least one clip")
    overrides = {}
    for f in fields(ScenarioParams):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = v
    params = ScenarioParams(**{**overrides, "seed": args.seed})
    manifest = gen_dataset(
        args.n_pos, args.n_neg, params, args.out, test_fraction=args.test_fraction, name=args.name
    )
    print(
        f"wrote {len(manifest.samples)} clips to {args.out} "
        f"(train {len(manifest.splits['train'])}, test {len(manifest.splits['test'])})"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    manifest = _load_manifest(cfg["data"]["manifest"])
    tc = cfg["train"]
    if args.epochs is not None:
        tc.epochs = args.epochs

    def report(rec):
        print(f"epoch {rec['epoch']:3d}  train_loss {rec['train_loss']:.6f}  val_loss {rec['val_loss']:.6f}  lr {rec['lr']:.3g}")

    state = train(manifest, cfg["model"], tc, resume=args.resume, split=cfg["data"]["split"], on_epoch=report)
    print(f"finished {state.epoch} epochs; checkpoints in {tc.checkpoint_dir}")
    return EXIT_OK


def _results_from_probs(samples, probs_file) -> list[AnticipationResult]:
    try:
        table = json.loads(Path(probs_file).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read probabilities {probs_file}: {exc}") from exc
    missing = [s.id for s in samples if s.id not in table]
    if missing:
        raise UsageError(f"probabilities missing for {missing[:5]}")
    return [AnticipationResult(s.id, table[s.id], s.label, s.toa, s.fps) for s in samples]


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.manifest)
    try:
        samples = manifest.split(args.split)
    except ManifestError as exc:
        raise UsageError(str(exc)) from exc
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    if args.probs_file:
        results = _results_from_probs(samples, args.probs_file)
    else:
        if not args.checkpoint:
            raise UsageError("need --checkpoint or --probs-file")
        state = load_checkpoint(args.checkpoint)
        bundles = [manifest.load_bundle(s) for s in samples]
        results = []
        for i in range(0, len(samples), 10):
            chunk = samples[i : i + 10]
            for s, p in zip(chunk, accident_probs(state.model, bundles[i : i + 10])):
                results.append(AnticipationResult(s.id, p, s.label, s.toa, s.fps))
    try:
        report = evaluate(results)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    export_report(report, results, args.out, sigma=args.sigma)
    print(f"AP {report.ap!r}")
    print(f"mTTA {report.mtta!r}")
    print(f"TTA@bestAP {report.tta_at_best_ap!r}")
    return EXIT_OK


def cmd_predict(args) -> int:
    try:
        bundle = read_bundle(args.bundle)
    except (OSError, BundleFormatError) as exc:
        raise UsageError(f"bad bundle {args.bundle}: {exc}") from exc
    state = load_checkpoint(args.checkpoint)
    try:
        (p,) = accident_probs(state.model, [bundle])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["frame", "p_raw", "p_smoothed"])
        for t, (raw, sm) in enumerate(zip(p, smooth(p, args.sigma))):
            w.writerow([t, repr(float(raw)), repr(float(sm))])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_mix_augment(args) -> int:
    manifest = _load_manifest(args.manifest)
    pool = _load_manifest(args.generated)
    try:
        mixed = mix_augment(manifest, list(pool.samples), args.ratio, args.seed, mode=args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    # generated bundle paths are resolved against their own manifest
    gen_ids = {s.id for s in pool.samples}
    out = Path(args.out)
    samples = []
    for s in mixed.samples:
        path = pool.bundle_file(s) if s.id in gen_ids else manifest.bundle_file(s)
        samples.append(type(s).from_json({**s.to_json(), "bundle_path": str(Path(path).resolve())}))
    result = DatasetManifest(mixed.name, tuple(samples), mixed.splits, root=out.parent)
    result.save(out)
    before, after = len(manifest.splits["train"]), len(mixed.splits["train"])
    print(f"train split {before} -> {after} clips; test split unchanged ({len(mixed.splits.get('test', ()))})")
    return EXIT_OK


def cmd_stats(args) -> int:
    manifest = _load_manifest(args.manifest)
    out = {}
    try:
        out["start_frames"] = start_frame_stats(manifest, args.split)
    except ManifestError as exc:
        out["start_frames"] = {"error": str(exc)}
    if args.split:
        try:
            out["factors"] = factor_distribution(manifest, args.split)
        except ManifestError as exc:
            out["factors"] = {"error": str(exc)}
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="accant", description="Dynamic-GCN traffic accident anticipation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a synthetic collision dataset")
    g.add_argument("--n-pos", type=int, required=True)
    g.add_argument("--n-neg", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--name", default="synthetic", help="dataset name, also the clip id prefix")
    g.add_argument("--num-agents", dest="num_agents", type=int)
    g.add_argument("--num-frames", dest="num_frames", type=int)
    g.add_argument("--fps", type=int)
    g.add_argument("--feature-dim", dest="feature_dim", type=int)
    g.add_argument("--noise-std", dest="noise_std", type=float)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("config")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or given probabilities) on a split")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--probs-file", help="JSON {video_id: [p0, p1, ...]} used instead of a model")
    e.add_argument("--sigma", type=float, default=2.0)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="per-frame probabilities for one bundle")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--bundle", required=True)
    pr.add_argument("--out")
    pr.add_argument("--sigma", type=float, default=2.0)
    pr.set_defaults(func=cmd_predict)

    m = sub.add_parser("mix-augment", help="add or swap generated negatives into the training split")
    m.add_argument("--manifest", required=True)
    m.add_argument("--generated", required=True, help="manifest listing generated negative clips")
    m.add_argument("--ratio", type=float, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--mode", choices=("add", "replace"), default="add")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mix_augment)

    s = sub.add_parser("stats", help="accident start-frame and scene-factor statistics")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, RejectionCapExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
