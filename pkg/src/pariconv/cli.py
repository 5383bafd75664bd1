"""Command-line entry point: ``pariconv <command> [flags]``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .checkpoint import load_model, save_model
from .config import merge, read_config
from .data import make_dataset, read_dataset, split, write_dataset
from .errors import CheckpointError, ParameterError, ParseError, PariError
from .io import FORMATS, load_cloud
from .lrf import POLICIES
from .net import VARIANTS, ClassifierConfig, cloud_geometry, count_flops, count_params
from .pairfeat import RELPOSE_DIMS, save_edge_csv, save_edge_dump
from .probe import ambiguity_probe
from .train import ROTATION_MODES, TrainConfig, evaluate, train
from .verify import dump_worst, run_checks

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
PAPER_SCALE = {"widths": (64, 64, 128, 256), "emb": 1024, "head": (512, 256), "k": 20, "num_classes": 40}


def _sci(x) -> str:
    return "%.17e" % x


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--widths", type=_ints, help="comma-separated convolution widths")
    g.add_argument("--emb", type=int)
    g.add_argument("--head", type=_ints, help="comma-separated head widths")
    g.add_argument("--k", type=int)
    g.add_argument("--lrf-policy", dest="lrf_policy", choices=POLICIES)
    g.add_argument("--relpose", choices=tuple(RELPOSE_DIMS))
    g.add_argument("--theta-hidden", dest="theta_hidden", type=int)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr-max", dest="lr_max", type=float)
    g.add_argument("--lr-min", dest="lr_min", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    g.add_argument("--train-rotation", dest="train_rotation", choices=ROTATION_MODES)
    g.add_argument("--test-rotation", dest="test_rotation", choices=ROTATION_MODES)
    g.add_argument("--precision", choices=("float32", "float64"))


def _flags(args, cls):
    return {f.name: getattr(args, f.name, None) for f in fields(cls)}


def _defaults(cls):
    return {f.name: f.default for f in fields(cls)}


def _effective(args, num_classes=None):
    """Model and train configs after applying defaults, flags and the config file."""
    file_values = read_config(args.config) if getattr(args, "config", None) else {}
    tflags = _flags(args, TrainConfig)
    tflags["seed"] = getattr(args, "seed", None)
    tcfg = TrainConfig(**merge(_defaults(TrainConfig), tflags, file_values.get("train", {})))
    mflags = _flags(args, ClassifierConfig)
    mflags["precision"] = tcfg.precision
    if num_classes is not None:
        mflags["num_classes"] = num_classes
    mflags["dropout"] = tcfg.dropout_rate
    mcfg = ClassifierConfig(**merge(_defaults(ClassifierConfig), mflags, file_values.get("model", {})))
    return mcfg, tcfg, file_values


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_gen_data(args):
    file_values = read_config(args.config).get("data", {}) if args.config else {}
    flags = {k: getattr(args, k) for k in ("classes", "per_class", "points", "noise", "dropout", "seed")}
    defaults = {"classes": 8, "per_class": 400, "points": 512, "noise": 0.0, "dropout": 0.0, "seed": 0}
    opts = merge(defaults, flags, file_values)
    samples = make_dataset(**opts)
    meta = {"generator": "pariconv " + __version__, "noise_sigma": opts["noise"], "point_dropout": opts["dropout"],
            "points": opts["points"], "per_class": opts["per_class"], "seed": opts["seed"], "format": args.format}
    path = write_dataset(samples, args.out, meta, args.format)
    n_train = sum(s.split == "train" for s in samples)
    print(f"wrote {len(samples)} clouds ({n_train} train, {len(samples) - n_train} test) to {args.out}")
    print(f"manifest {path}")
    return EXIT_OK


def cmd_train(args):
    samples, manifest = read_dataset(args.data)
    mcfg, tcfg, file_values = _effective(args, num_classes=len(manifest["classes"]))
    os.makedirs(args.out, exist_ok=True)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    metrics_path = os.path.join(args.out, "metrics.csv")
    model, metrics = train(split(samples, "train"), mcfg, tcfg, log=log, metrics_path=metrics_path)
    ckpt = os.path.join(args.out, "model.ckpt")
    save_model(ckpt, model, {"train": asdict(tcfg)})
    _write_json(os.path.join(args.out, "run_manifest.json"), {
        "command": "train", "data": os.path.abspath(args.data), "model": model.cfg.to_dict(),
        "train": asdict(tcfg), "config_file": file_values, "threads": args.threads,
        "epoch_seconds": metrics.epoch_seconds, "checkpoint": "model.ckpt", "metrics": "metrics.csv",
    })
    print(f"final train loss {_sci(metrics.loss)} acc {_sci(metrics.accuracy)}")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args):
    samples, manifest = read_dataset(args.data)
    expect = None
    if args.config:
        expect, _, _ = _effective(args, num_classes=len(manifest["classes"]))
    model = load_model(args.checkpoint, expect)
    clouds = split(samples, args.split)
    m = evaluate(clouds, model, args.test_rotation, seed=args.seed)
    print(f"rotation {args.test_rotation} accuracy {_sci(m.accuracy)} mean_class_accuracy "
          f"{_sci(m.mean_class_accuracy)} loss {_sci(m.loss)}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "label", "prediction"])
            for i, (c, p) in enumerate(zip(clouds, m.predictions)):
                w.writerow([i, c.label, int(p)])
    return EXIT_OK


def cmd_verify(args):
    results = run_checks(trials=args.trials, rotations=args.rotations, precision=args.precision,
                         policy=args.policy, variant=args.variant, seed=args.seed, clouds=args.clouds)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name} max_deviation {_sci(r.deviation)} threshold {_sci(r.threshold)}")
        if not r.passed:
            failed = True
            print(f"  worst-case inputs written to {dump_worst(r, args.dump_dir)}")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_demo(args):
    rep = ambiguity_probe(args.seed, identity=args.identity)
    print(f"baseline_delta {_sci(rep['baseline_delta'])}")
    print(f"pari_delta {_sci(rep['pari_delta'])}")
    return EXIT_OK


def cmd_extract(args):
    model = load_model(args.checkpoint)
    cfg = model.cfg
    n_layers = len(cfg.widths) + 1
    if not 1 <= args.layer <= n_layers:
        raise ParameterError(f"--layer must lie in [1, {n_layers}] (last one is the shared embedding)")
    cloud = load_cloud(args.input)
    geo = cloud_geometry(cloud, cfg)
    _, feats = model(geo, return_features=True)
    x = feats[args.layer - 1].data[0].astype(np.float64)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point"] + [f"f{i}" for i in range(x.shape[1])])
        for i, row in enumerate(x):
            w.writerow([i] + [_sci(v) for v in row])
    print(f"wrote {x.shape[0]} x {x.shape[1]} features of layer {args.layer} to {args.out}")
    if args.edges:
        if not cfg.rotation_invariant:
            raise ParameterError("the coordinate baseline has no relative-pose edges")
        idx, rp = geo.graph[0], geo.relpose[0]
        if args.edges.endswith(".csv"):
            save_edge_csv(args.edges, idx, rp)
        else:
            save_edge_dump(args.edges, idx, rp)
        print(f"wrote layer-1 edge features to {args.edges}")
    return EXIT_OK


def cmd_bench(args):
    base = read_config(args.config).get("model", {}) if args.config else {}
    if args.paper_scale:
        base = {**base, **PAPER_SCALE}
    if args.classes is not None:
        base["num_classes"] = args.classes
    n = args.points
    print(f"points {n}")
    for variant in VARIANTS:
        cfg = ClassifierConfig(**{**base, "variant": variant})
        print(f"{variant} params {count_params(cfg)} flops {count_flops(cfg, n)}")
    return EXIT_OK


# ----------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="pariconv", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic labelled dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--dropout", type=float, help="fraction of points removed per cloud")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=FORMATS, default="xyz")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint under test rotations")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="fail if the checkpoint was trained with a different model config")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--test-rotation", dest="test_rotation", choices=ROTATION_MODES, default="so3")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="per-sample predictions CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-invariance", parents=[common], help="run the rotation invariance checks")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--rotations", type=int, default=10)
    p.add_argument("--clouds", type=int, default=2, help="clouds for the end-to-end check")
    p.add_argument("--precision", choices=("float32", "float64"), default="float64")
    p.add_argument("--policy", choices=POLICIES, default="normal_barycenter")
    p.add_argument("--variant", choices=tuple(RELPOSE_DIMS), default="appf8", help="relative pose encoding")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-dir", dest="dump_dir", default=".")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("demo-ambiguity", parents=[common], help="per-patch rotation probe")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identity", action="store_true", help="use identity patch rotations")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("extract-features", parents=[common], help="export per-point features of a layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="point cloud file")
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--edges", help="also write layer-1 relative poses (.csv or binary dump)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("bench", parents=[common], help="parameter and FLOP counts per variant")
    p.add_argument("--config")
    p.add_argument("--paper-scale", dest="paper_scale", action="store_true")
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--classes", type=int)
    p.set_defaults(func=cmd_bench)
    return parser


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ParameterError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit(args.threads):
            code = args.func(args)
    except (CheckpointError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PariError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    return code


if __name__ == "__main__":
    sys.exit(main())
