"""``ssft`` command line: synth, train, eval, ablate, augment, export-features.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime or numeric failure.
``SSFT_THREADS`` caps the BLAS thread pool.
"""
import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .augment import AugmentSpec, augment
from .config import ConfigError, load_run_config
from .data import CubeFormatError, load_cube, save_cube, save_dataset, synth_dataset
from .estimator import SSFTClassifier
from .model import CheckpointError, export_features, load_checkpoint, param_count
from .training import NumericalError, run

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("ssft")


def _emit(obj):
    print(json.dumps(obj, indent=1))


def _thread_limit():
    n = os.environ.get("SSFT_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


# ---------------------------------------------------------------- subcommands

def cmd_synth(args):
    if args.classes < 2:
        raise ConfigError("--classes must be >= 2")
    manifest, cubes = synth_dataset(args.classes, args.per_class, tuple(args.size), args.seed, args.noise)
    out = Path(args.out)
    try:
        path = save_dataset(out, manifest, cubes)
    except OSError as exc:
        raise ConfigError(f"cannot write to {out}: {exc}") from exc
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    counts = {s: len(manifest.indices(s)) for s in ("train", "val", "test")}
    _emit({"manifest": str(path), "num_classes": manifest.num_classes, "samples": len(cubes),
           "splits": counts, "shape": list(args.size), "seed": args.seed, "manifest_sha256": digest})
    return EXIT_OK


def _load(args):
    cfg = load_run_config(args.config)
    manifest, cubes = cfg.load_data()
    return cfg, manifest, cubes


def cmd_train(args):
    cfg, manifest, cubes = _load(args)
    if args.seed_list:
        cfg.train.seeds = list(args.seed_list)
    model_cfg = cfg.model_config(cubes[0].shape[2], manifest.num_classes)
    resolved = cfg.resolved(model_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=1))
    report = run(manifest, cubes, model_cfg, cfg.train, out_dir=out)
    report["resolved_config"] = resolved
    (out / "report.json").write_text(json.dumps(report, indent=1))
    _emit(report)
    if not report["aggregate"]:
        return EXIT_RUNTIME
    return EXIT_OK


def _split_arrays(manifest, cubes, split):
    idx = manifest.indices(split)
    if not idx:
        raise ConfigError(f"split {split!r} is empty")
    X = np.stack([cubes[i].data for i in idx])
    return idx, X, manifest.targets(idx)


def _load_estimator(cfg, manifest, cubes, checkpoint):
    model_cfg = cfg.model_config(cubes[0].shape[2], manifest.num_classes)
    params, model_cfg, index = load_checkpoint(checkpoint, config=model_cfg)
    est = SSFTClassifier.load(checkpoint)
    est.params_, est.config_ = params, model_cfg
    return est


def cmd_eval(args):
    cfg, manifest, cubes = _load(args)
    est = _load_estimator(cfg, manifest, cubes, args.checkpoint)
    _, X, y = _split_arrays(manifest, cubes, args.split)
    metrics = est.evaluate(X, y, batch_size=args.batch)
    report = {"split": args.split, "checkpoint": str(args.checkpoint), "n": len(X), "metrics": metrics,
              "resolved_config": cfg.resolved(est.config_)}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    _emit(report)
    return EXIT_OK


def cmd_ablate(args):
    cfg, manifest, cubes = _load(args)
    if args.seed_list:
        cfg.train.seeds = list(args.seed_list)
    C, K = cubes[0].shape[2], manifest.num_classes
    base = cfg.model_config(C, K)
    variants = [("full", base)]
    if args.lambda_grid:
        if any(v < 0 for v in args.lambda_grid):
            raise ConfigError("--lambda-grid values must be >= 0")
        variants = [(f"lambda_{v:g}", cfg.model_config(C, K, aux_heads=True, lambda_aux=v))
                    for v in args.lambda_grid]
    elif args.disable:
        mask = {b: b != args.disable for b in ("spectral", "spatial")}
        variants.append((f"no_{args.disable}", cfg.model_config(C, K, branch_mask=mask)))
    else:
        on = args.aux == "on"
        variants.append((f"aux_{args.aux}", cfg.model_config(C, K, aux_heads=on,
                                                             lambda_aux=None if on else 0.0)))
    rows = []
    for name, mc in variants:
        out_dir = Path(args.work_dir) / name if args.work_dir else None
        rep = run(manifest, cubes, mc, cfg.train, out_dir=out_dir)
        agg = rep["aggregate"]
        if not agg:
            raise NumericalError(f"variant {name}: every seed failed")
        rows.append({
            "variant": name,
            "lambda_aux": mc.lambda_aux,
            "params": param_count(mc)[0],
            "test_accuracy_mean": agg["test_accuracy"]["mean"],
            "test_accuracy_std": agg["test_accuracy"]["std"],
            "test_macro_f1_mean": agg["test_macro_f1"]["mean"],
            "test_macro_f1_std": agg["test_macro_f1"]["std"],
            "seeds": len(rep["seeds"]),
        })
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _emit({"csv": str(out), "rows": rows})
    return EXIT_OK


def cmd_augment(args):
    params = json.loads(args.params) if args.params else {}
    spec = AugmentSpec(args.op, 1.0, params)
    cube = load_cube(args.inp)
    out = augment(cube, spec, np.random.default_rng(args.seed))
    save_cube(out, args.out)
    _emit({"in": str(args.inp), "out": str(args.out), "op": spec.to_dict(), "seed": args.seed})
    return EXIT_OK


def cmd_export_features(args):
    cfg, manifest, cubes = _load(args)
    est = _load_estimator(cfg, manifest, cubes, args.checkpoint)
    est.feature_tap = args.tap
    idx, X, _ = _split_arrays(manifest, cubes, args.split)
    feats = est.transform(X)
    labels = [manifest.samples[i].labels if manifest.task == "multilabel" else manifest.samples[i].labels[0]
              for i in idx]
    path = export_features(args.out, [manifest.samples[i].id for i in idx], labels, feats)
    _emit({"csv": str(path), "rows": len(idx), "tap": args.tap, "dim": int(feats.shape[1])})
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="ssft", description="Spectral-spatial fusion transformer toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic hyperspectral dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--per-class", type=int, default=20)
    s.add_argument("--size", type=int, nargs=3, default=[32, 32, 64], metavar=("H", "W", "C"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.02)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train over one or more seeds")
    t.add_argument("--config", required=True)
    t.add_argument("--seed-list", type=int, nargs="+")
    t.add_argument("--out", default="runs/train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--batch", type=int, default=8)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare the model against a branch or auxiliary-head ablation, or sweep lambda_aux")
    g = a.add_mutually_exclusive_group(required=True)
    g.add_argument("--disable", choices=["spectral", "spatial"])
    g.add_argument("--aux", choices=["on", "off"])
    g.add_argument("--lambda-grid", type=float, nargs="+", metavar="L",
                   help="train one variant per deep-supervision weight")
    a.add_argument("--config", required=True)
    a.add_argument("--seed-list", type=int, nargs="+")
    a.add_argument("--out", default="ablation.csv")
    a.add_argument("--work-dir")
    a.set_defaults(func=cmd_ablate)

    u = sub.add_parser("augment", help="apply one augmentation (p=1) to a cube")
    u.add_argument("--in", dest="inp", required=True)
    u.add_argument("--op", required=True)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", required=True)
    u.add_argument("--params", help='JSON object of kind parameters, e.g. \'{"axis": 0}\'')
    u.set_defaults(func=cmd_augment)

    x = sub.add_parser("export-features", help="write per-sample embeddings as CSV")
    x.add_argument("--config", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--split", default="val", choices=["train", "val", "test"])
    x.add_argument("--tap", default="fused")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_features)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, CheckpointError, CubeFormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
