"""Command-line harness.

Subcommands: gradcheck, synth, train, infer, eval, export-slices.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
The VGAN_SEED environment variable overrides the configured seed for
seeded commands and is logged when used.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .data import remap_labels, synth_phantom
from .engine import ConfigError, ContractViolation, Tensor, no_grad
from .generator import generator_forward, shape_report
from .gradcheck import run_gradcheck
from .metrics import ensemble_average, export_slices, score_maps, scores_to_csv, \
    threshold_postprocess
from .training import TrainConfig, TrainingDiverged, load_generator, train_loop
from .volume_io import VolumeFormatError, load_dataset, load_volume, save_dataset, \
    save_volume

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_EPOCH_TS = "1970-01-01T00:00:00Z"


def _now(normalize):
    if normalize:
        return _EPOCH_TS
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _seed_from_env(seed):
    env = os.environ.get("VGAN_SEED")
    if env is None:
        return seed
    try:
        value = int(env)
    except ValueError:
        raise ConfigError(f"VGAN_SEED must be an integer, got {env!r}")
    log.info("seed %d overridden by VGAN_SEED=%d", seed, value)
    return value


def _write_manifest(path, data):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _parse_extents(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"extents must be three comma-separated integers, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"non-integer extent in {text!r}")


def cmd_gradcheck(args):
    try:
        results = run_gradcheck(args.op, eps=args.eps, seed=args.seed)
    except KeyError:
        raise ConfigError(
            f"unknown op {args.op!r}; run with no argument to check all"
        )
    width = max(len(r.op) for r in results)
    failures = 0
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.op:<{width}}  cases {r.cases}  max rel err {r.max_rel_err:.3e}  {status}")
        failures += not r.passed
    print(f"{len(results) - failures}/{len(results)} ops passed")
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


def cmd_synth(args):
    seed = _seed_from_env(args.seed)
    extents = _parse_extents(args.extents)
    try:
        hgg_w, lgg_w = (int(p) for p in args.grade_ratio.split(":"))
    except ValueError:
        raise ConfigError(f"grade ratio must look like 4:1, got {args.grade_ratio!r}")
    if hgg_w < 0 or lgg_w < 0 or hgg_w + lgg_w == 0:
        raise ConfigError(f"degenerate grade ratio {args.grade_ratio!r}")
    n_hgg = args.count * hgg_w // (hgg_w + lgg_w)
    samples = [
        synth_phantom(seed + i, extents, "HGG" if i < n_hgg else "LGG",
                      noise=args.noise)
        for i in range(args.count)
    ]
    manifest = save_dataset(args.out, samples)
    print(f"wrote {args.count} samples ({n_hgg} HGG, {args.count - n_hgg} LGG) "
          f"to {manifest}")
    return EXIT_OK


def cmd_train(args):
    if args.print_defaults:
        print(json.dumps(TrainConfig().to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not args.config:
        raise ConfigError("--config is required (or use --print-defaults)")
    if not args.data:
        raise ConfigError("--data manifest is required")
    cfg = TrainConfig.from_json(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    seed = _seed_from_env(overrides.get("seed", cfg.seed))
    overrides["seed"] = seed
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    cfg = replace(cfg, **overrides)
    try:
        dataset = load_dataset(args.data)
    except FileNotFoundError as e:
        raise ConfigError(f"dataset manifest not found: {e.filename}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "started": _now(args.normalize_timestamps),
        "finished": "",
        "checkpoints": [],
        "metric_log": "metrics.csv",
    }
    _write_manifest(manifest_path, manifest)
    print(json.dumps(shape_report(cfg.generator_config()), default=str))

    result = train_loop(dataset, cfg, out)

    manifest["finished"] = _now(args.normalize_timestamps)
    manifest["checkpoints"] = [[g.name, d.name] for g, d in result.checkpoints]
    _write_manifest(manifest_path, manifest)
    last = result.reports[-1] if result.reports else None
    if last is not None:
        print(f"finished {result.steps} steps: loss_G {last.loss_G:.4f}, "
              f"loss_D {last.loss_D:.4f}, dice {last.dice:.4f}")
    return EXIT_OK


def cmd_infer(args):
    cfg = TrainConfig.from_json(args.config)
    g_cfg = cfg.generator_config()
    models = [load_generator(p, g_cfg) for p in args.checkpoint]
    threshold = args.threshold if args.threshold is not None else cfg.threshold
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for vol_path in args.volumes:
        arr = load_volume(vol_path)
        if arr.shape[0] != cfg.in_channels:
            raise ContractViolation(
                f"{vol_path}: {arr.shape[0]} channels, config expects "
                f"{cfg.in_channels}"
            )
        if tuple(arr.shape[1:]) != cfg.patch_extents:
            raise ContractViolation(
                f"{vol_path}: extents {tuple(arr.shape[1:])} do not match the "
                f"configured patch {cfg.patch_extents}; pad or crop first"
            )
        x = Tensor(arr[None].astype(np.float32))
        maps_list = []
        for params in models:
            with no_grad():
                full, _, _ = generator_forward(x, params, g_cfg)
            maps_list.append(full.data[0].astype(np.float64))
        avg = ensemble_average(maps_list)
        labels = threshold_postprocess(avg, threshold)
        stem = Path(vol_path).name.removesuffix(".vvol").removesuffix("_img")
        out_path = out / f"{stem}_pred.vvol"
        save_volume(out_path, labels)
        print(f"{vol_path} -> {out_path}")
        if args.slices:
            for axis in range(3):
                export_slices(labels, axis, [labels.shape[axis] // 2], out,
                              prefix=f"{stem}_pred")
    return EXIT_OK


def cmd_eval(args):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_names = {p.name for p in pred_dir.glob("*.vvol")}
    gt_names = {p.name for p in gt_dir.glob("*.vvol")}
    common = sorted(pred_names & gt_names)
    if not common:
        raise ConfigError(
            f"no volume names shared between {pred_dir} and {gt_dir}"
        )
    rows = []
    for name in common:
        pred = load_volume(pred_dir / name)[0]
        gt = load_volume(gt_dir / name)[0]
        scores = score_maps(remap_labels(pred), remap_labels(gt))
        rows.append((name.removesuffix(".vvol"), scores))
    csv = scores_to_csv(rows)
    if args.out:
        Path(args.out).write_text(csv)
        print(f"wrote scores for {len(rows)} cases to {args.out}")
    else:
        sys.stdout.write(csv)
    return EXIT_OK


def cmd_export_slices(args):
    arr = load_volume(args.volume)
    if not 0 <= args.channel < arr.shape[0]:
        raise ContractViolation(
            f"channel {args.channel} outside 0..{arr.shape[0] - 1}"
        )
    vol = arr[args.channel]
    if args.indices == "mid":
        indices = [vol.shape[args.axis] // 2]
    else:
        try:
            indices = [int(p) for p in args.indices.split(",")]
        except ValueError:
            raise ConfigError(f"indices must be integers, got {args.indices!r}")
    stem = Path(args.volume).name.removesuffix(".vvol")
    paths = export_slices(vol, args.axis, indices, args.out, prefix=stem)
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="vgan",
        description="Volumetric adversarial segmentation harness",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of registered ops")
    g.add_argument("op", nargs="?", default="all", help="op name, default all")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--extents", default="64,64,64")
    s.add_argument("--grade-ratio", default="4:1", help="HGG:LGG sample ratio")
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run the adversarial training loop")
    t.add_argument("--config", help="JSON config path")
    t.add_argument("--data", help="dataset manifest path")
    t.add_argument("--out", default="runs/run")
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--print-defaults", action="store_true",
                   help="dump the default config as JSON and exit")
    t.add_argument("--normalize-timestamps", action="store_true",
                   help="write epoch timestamps for byte-reproducible manifests")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment volumes with trained checkpoints")
    i.add_argument("--config", required=True)
    i.add_argument("--checkpoint", nargs="+", required=True,
                   help="one or more generator checkpoints; several are ensembled")
    i.add_argument("--out", required=True)
    i.add_argument("--threshold", type=float, default=None)
    i.add_argument("--slices", action="store_true",
                   help="export mid slices of each prediction")
    i.add_argument("volumes", nargs="+")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted label volumes against truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", default=None, help="CSV path, default stdout")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-slices", help="write slice images from a volume")
    x.add_argument("volume")
    x.add_argument("--axis", type=int, default=0, choices=(0, 1, 2))
    x.add_argument("--indices", default="mid", help="comma list or 'mid'")
    x.add_argument("--channel", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_slices)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractViolation, CheckpointError, VolumeFormatError,
            TrainingDiverged, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
