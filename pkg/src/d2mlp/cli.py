"""Command-line interface: synth, train, eval, predict, gradcheck.

Run configs are flat JSON with dotted keys (network.*, train.*, paths.*).
Unknown keys are rejected and the fully materialized effective config is
echoed to stdout before anything else happens, so a run is reproducible
from its log alone.

Exit codes: 0 success, 1 verification failure (gradcheck), 2 usage or
validation error. Every command validates its inputs before writing any
file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ops
from .data import load_dataset, save_dataset, synth_generate
from .metrics import evaluate
from .network import NetworkConfig, forward, load_checkpoint, save_checkpoint
from .tensor import Tensor, load_d2t, save_d2t
from .training import TrainConfig, history_csv, train_loop
from .verify import TOLERANCE, run_target

__all__ = ["main"]


class UsageError(Exception):
    """Invalid arguments, config or data; maps to exit code 2."""


_CONFIG_DEFAULTS = {
    "network.base_channels": 48,
    "network.patch_count": 4,
    "network.blocks_per_stage": 2,
    "network.channel_mlp_expansion": 4,
    "network.num_classes": 2,
    "network.in_channels": 1,
    "network.input_size": None,  # null: use the dataset's size
    "network.variant": "ddm",
    "network.deep_supervision": True,
    "train.lr0": 0.001,
    "train.max_steps": 500,
    "train.poly_exponent": 0.9,
    "train.momentum": 0.9,
    "train.weight_decay": 0.0,
    "train.batch_size": 4,
    "train.seed": 0,
    "train.dice_eps": 1e-5,
    "train.deep_supervision": None,  # null: follow network.deep_supervision
    "train.eval_every": 25,
    "paths.data": None,
    "paths.out": ".",
    "paths.checkpoint": None,  # null: <paths.out>/checkpoint.d2c
}


def _limit_threads(n: int) -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(limits=n)


def _load_run_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object with dotted keys")
    unknown = sorted(set(raw) - set(_CONFIG_DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(_CONFIG_DEFAULTS)
    merged.update(raw)
    return merged


def _split_section(cfg: dict, section: str) -> dict:
    prefix = section + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def cmd_synth(args) -> int:
    if args.size % 32:
        raise UsageError(f"--size {args.size} must be divisible by 32")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.classes < 2:
        raise UsageError("--classes must be >= 2")
    batch = synth_generate(args.seed, args.count, args.size, args.classes)
    save_dataset(args.out, batch, seed=args.seed, num_classes=args.classes)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    if cfg["paths.data"] is None:
        raise UsageError("paths.data is required")
    data_dir = Path(cfg["paths.data"])
    if not data_dir.is_dir():
        raise UsageError(f"dataset directory not found: {data_dir}")
    try:
        dataset, meta = load_dataset(data_dir)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"failed to load dataset: {exc}")

    if cfg["network.num_classes"] != meta["num_classes"]:
        raise UsageError(
            f"network.num_classes {cfg['network.num_classes']} != dataset "
            f"num_classes {meta['num_classes']}"
        )
    if cfg["network.input_size"] is None:
        cfg["network.input_size"] = meta["size"]
    elif cfg["network.input_size"] != meta["size"]:
        raise UsageError(
            f"network.input_size {cfg['network.input_size']} != dataset size {meta['size']}"
        )
    if cfg["train.deep_supervision"] is None:
        cfg["train.deep_supervision"] = cfg["network.deep_supervision"]
    out_dir = Path(cfg["paths.out"])
    if cfg["paths.checkpoint"] is None:
        cfg["paths.checkpoint"] = str(out_dir / "checkpoint.d2c")

    try:
        net_cfg = NetworkConfig(**_split_section(cfg, "network"))
        train_cfg = TrainConfig(**_split_section(cfg, "train"))
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc))
    if train_cfg.deep_supervision and not net_cfg.deep_supervision:
        raise UsageError("train.deep_supervision needs network.deep_supervision")

    print(json.dumps(cfg, sort_keys=True, indent=2))
    sys.stdout.flush()

    params, history = train_loop(net_cfg, train_cfg, dataset)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(cfg["paths.checkpoint"], params)
    (out_dir / "history.csv").write_text(history_csv(history))
    final_dice = next(d for _, _, _, d in reversed(history) if d is not None)
    print(f"checkpoint: {cfg['paths.checkpoint']}")
    print(f"history: {out_dir / 'history.csv'}")
    print(f"final train_dice: {final_dice!r}")
    return 0


def cmd_eval(args) -> int:
    try:
        params = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise UsageError(f"failed to load checkpoint: {exc}")
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"dataset directory not found: {data_dir}")
    try:
        dataset, meta = load_dataset(data_dir)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"failed to load dataset: {exc}")
    cfg = params.cfg
    if cfg.num_classes != meta["num_classes"]:
        raise UsageError(
            f"checkpoint num_classes {cfg.num_classes} != dataset {meta['num_classes']}"
        )
    if cfg.input_size != meta["size"]:
        raise UsageError(
            f"checkpoint input_size {cfg.input_size} != dataset size {meta['size']}"
        )
    report = evaluate(params, dataset, cfg.num_classes)
    print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    return 0


def cmd_predict(args) -> int:
    try:
        params = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise UsageError(f"failed to load checkpoint: {exc}")
    try:
        img = load_d2t(args.input)
    except (OSError, ValueError) as exc:
        raise UsageError(f"failed to load input tensor: {exc}")
    arr = img.data
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] != params.cfg.in_channels:
        raise UsageError(
            f"input must be (H,W) or ({params.cfg.in_channels},H,W), got {img.shape}"
        )
    if arr.shape[-1] != params.cfg.input_size or arr.shape[-2] != params.cfg.input_size:
        raise UsageError(
            f"input spatial extents {arr.shape[-2:]} != checkpoint input_size "
            f"{params.cfg.input_size}"
        )
    out = forward(params, Tensor(arr[None].astype(np.float32)), bn_mode="eval")
    logits = out[0] if isinstance(out, tuple) else out
    mask = np.argmax(logits.data, axis=1)[0].astype(np.uint8)
    save_d2t(args.output, Tensor(mask))
    print(f"wrote {args.output}")
    return 0


def cmd_gradcheck(args) -> int:
    targets = ["ops", "ddm", "block", "network"] if args.target == "all" else [args.target]
    if args.corrupt_backward:
        ops._GELU_BACKWARD_SCALE = 1.001
    failed = False
    try:
        for target in targets:
            for name, err in run_target(target, seed=args.seed):
                status = "ok" if err < TOLERANCE else "FAIL"
                failed |= err >= TOLERANCE
                print(f"{status} {target}.{name} max_rel={err:.3e}")
    finally:
        ops._GELU_BACKWARD_SCALE = 1.0
    print("gradcheck: " + ("FAIL" if failed else f"all below {TOLERANCE:g}"))
    return 1 if failed else 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="d2mlp",
        description="Dynamic decomposed MLP-mixer segmentation toolkit",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="intra-op thread cap (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a label map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--target", choices=["ops", "ddm", "block", "network", "all"],
                   required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-backward", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
