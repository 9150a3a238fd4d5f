"""Command-line entry point: train, eval, gradcheck, synth.

Configuration is a JSON file plus flag overrides (flags win); the fully
resolved configuration is echoed to <outdir>/resolved-config before any
work starts. Exit codes: 0 success, 2 config error, 3 data error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checks import THRESHOLD, run_suite
from .data import DataError, batch_iter, load_dataset, synth_generate, synth_write
from .metrics import binarize, confusion, write_metrics_csv
from .model import (PRESETS, FingerprintError, TeslNet, WeightFormatError,
                    net_from_weights)
from .tensor import Tensor
from .train import NumericalAbort, TrainConfig, fit

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read config {path}: {e}", EXIT_CONFIG)


def _resolve_data(spec: str, size: int, seed: int):
    """A dataset path, or synth:seed=S,n=N[,size=P] for an in-memory corpus."""
    if spec.startswith("synth:"):
        opts = dict(kv.split("=") for kv in spec[len("synth:"):].split(",") if kv)
        n = int(opts.get("n", 8))
        s_seed = int(opts.get("seed", seed))
        s_size = int(opts.get("size", size))
        if s_size != size:
            raise CliError(f"synth size {s_size} does not match model size {size}",
                           EXIT_CONFIG)
        samples = synth_generate(n, s_size, s_seed)
        by_id = {s.id: s for s in samples}
        ids = sorted(by_id)
        n_val = max(1, len(ids) // 5) if len(ids) > 1 else 0
        split_train = ids[: len(ids) - n_val] if n_val else ids
        split_val = ids[len(ids) - n_val:] if n_val else ids
        return split_train, split_val, ids, by_id.__getitem__
    try:
        split, loader = load_dataset(spec, size=size, seed=seed)
    except DataError as e:
        raise CliError(str(e), EXIT_DATA)
    return split.train, split.val, split.test or split.train + split.val, loader


def _prepare_outdir(args, resolved: dict) -> Path:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "resolved-config").write_text(json.dumps(resolved, indent=2) + "\n")
    return outdir


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    preset = args.preset or file_cfg.get("preset", "desk")
    if preset not in PRESETS:
        raise CliError(f"unknown preset {preset!r}", EXIT_CONFIG)
    net_cfg = dataclasses.replace(PRESETS[preset])
    if args.seed is not None:
        net_cfg.seed = args.seed
    tc = TrainConfig()
    for name in ("epochs", "batch_size", "loss", "lr0"):
        if name in file_cfg:
            setattr(tc, name, file_cfg[name])
        override = getattr(args, name, None)
        if override is not None:
            setattr(tc, name, override)
    if args.seed is not None:
        tc.seed = args.seed
    try:
        tc.validate()
        net = TeslNet(net_cfg)
    except ValueError as e:
        raise CliError(str(e), EXIT_CONFIG)

    data_spec = args.data or file_cfg.get("data")
    if not data_spec:
        raise CliError("no dataset given (--data or config 'data')", EXIT_CONFIG)
    train_ids, val_ids, _, loader = _resolve_data(data_spec, net_cfg.height, tc.seed)

    resolved = {"command": "train", "preset": preset, "data": data_spec,
                "net": dataclasses.asdict(net_cfg), "train": dataclasses.asdict(tc)}
    outdir = _prepare_outdir(args, resolved)
    try:
        log = fit(net, train_ids, val_ids, loader, tc, outdir=outdir)
    except NumericalAbort as e:
        raise CliError(str(e), EXIT_NUMERIC)
    print(f"trained {len(log.epochs)} epochs, "
          f"best val dice {log.best_val_dice:.4f} at epoch {log.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        blob = Path(args.weights).read_bytes()
        net = net_from_weights(blob)
    except OSError as e:
        raise CliError(f"cannot read weights: {e}", EXIT_CONFIG)
    except (WeightFormatError, FingerprintError) as e:
        raise CliError(str(e), EXIT_CONFIG)
    train_ids, val_ids, eval_ids, loader = _resolve_data(
        args.data, net.config.height, net.config.seed)
    if args.split == "train":
        eval_ids = train_ids
    elif args.split == "val":
        eval_ids = val_ids

    resolved = {"command": "eval", "weights": str(args.weights), "data": args.data,
                "split": args.split, "net": dataclasses.asdict(net.config)}
    outdir = _prepare_outdir(args, resolved)
    masks_dir = outdir / "masks"
    masks_dir.mkdir(exist_ok=True)

    entries = []
    for chunk, images, masks in batch_iter(eval_ids, loader, 8, shuffle=False):
        pred = net.forward(Tensor(images.astype(np.float32)), training=False)
        binary = binarize(pred.data, args.threshold)
        for i, sid in enumerate(chunk):
            entries.append((sid, confusion(binary[i, 0], masks[i, 0])))
            Image.fromarray(binary[i, 0] * 255).save(masks_dir / f"{sid}.png")
            if args.panels:
                img = (images[i].transpose(1, 2, 0) * 255).round().astype(np.uint8)
                gt = np.repeat((masks[i, 0] * 255)[..., None], 3, axis=-1)
                pr = np.repeat((binary[i, 0] * 255)[..., None], 3, axis=-1)
                panel = np.concatenate([img, gt, pr], axis=1)
                Image.fromarray(panel).save(outdir / f"panel_{sid}.png")
    write_metrics_csv(outdir / "metrics.csv", entries)
    print(f"evaluated {len(entries)} images -> {outdir / 'metrics.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    extra = {}
    if args.self_test_corrupt:
        extra["corrupted"] = lambda: 1.0  # fixture: a knowingly wrong gradient
    try:
        results = run_suite(args.scope, extra=extra)
    except KeyError as e:
        raise CliError(str(e.args[0]), EXIT_CONFIG)
    failures = []
    for name, err in results.items():
        status = "ok" if err < THRESHOLD else "FAIL"
        print(f"{name:20s} max_rel_err={err:.3e}  {status}")
        if err >= THRESHOLD:
            failures.append(name)
    if failures:
        print(f"gradcheck failures: {', '.join(failures)}", file=sys.stderr)
        return 1
    return EXIT_OK


def cmd_synth(args) -> int:
    samples = synth_generate(args.n, args.size, args.seed)
    outdir = Path(args.outdir)
    try:
        synth_write(samples, outdir)
    except OSError as e:
        raise CliError(f"cannot write corpus: {e}", EXIT_DATA)
    print(f"wrote {len(samples)} samples under {outdir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="teslnet",
                                description="Lesion segmentation stack: "
                                            "train, evaluate, verify gradients.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--data", help="dataset root or synth:seed=S,n=N")
    t.add_argument("--outdir", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--loss", choices=("bce", "dice", "bce+dice"))
    t.add_argument("--lr0", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate saved weights")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--outdir", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--panels", action="store_true",
                   help="write image|GT|prediction side-by-side panels")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="run finite-difference gradient suites")
    g.add_argument("scope", nargs="?", default="all")
    g.add_argument("--self-test-corrupt", action="store_true",
                   help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--outdir", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
