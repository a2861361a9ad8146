"""Command line entry point: ``singlepos gen-data|train|eval|inspect-heatmaps``.

Exit codes are 0 on success, 1 for user errors (bad flags, config, data or
checkpoints) and 2 for unexpected internal failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import containers
from .consistency import HeatmapStore, StoreError, export_heatmaps
from .data import DataError, generate_synthetic, load_dataset, save_dataset, split, to_single_positive
from .losses import UNKNOWN
from .trainer import (
    ConfigError,
    TrainConfig,
    TrainingError,
    evaluate_model,
    evaluation_inputs,
    format_value,
    load_model,
    load_state,
    train,
)

log = logging.getLogger("singlepos")

RUN_ROOT_ENV = "SINGLEPOS_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for internal errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config files -----------------------------------------------------------------

def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``--section.key value`` or ``--section.key=value`` pairs."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for {tok}")
            key, value = tok[2:], tokens[i + 1]
            i += 2
        out[key] = value
    return out


def write_config_echo(path, config: TrainConfig) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in config.to_flat().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def prepare_data(config: TrainConfig):
    """Load ``data.path`` and return ``(train, val)`` records as the trainer sees them."""
    if not config.data.path:
        raise ConfigError("no dataset given: pass --data or set data.path")
    records = load_dataset(config.data.path)
    f = config.data.val_fraction
    tr, va = split(records, (1 - f, f), seed=config.data.split_seed)
    if config.data.annotation == "single":
        tr = to_single_positive(tr, seed=config.data.split_seed)
    return tr, va


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    records = generate_synthetic(args.n, num_classes=args.classes, image_size=args.size,
                                 seed=args.seed, placement=args.placement)
    save_dataset(records, args.out)
    print(f"wrote {len(records)} images to {args.out}")
    return 0


def cmd_train(args, extra: list[str]) -> int:
    flat = read_config_file(args.config) if args.config else {}
    flat.update(parse_overrides(extra))
    if args.data:
        flat["data.path"] = str(Path(args.data).resolve())
    config = TrainConfig.from_flat(flat)
    if config.data.path:
        config.data.path = str(Path(config.data.path).resolve())
    tr, va = prepare_data(config)

    run_dir = Path(args.run_dir) if args.run_dir else (
        Path(os.environ.get(RUN_ROOT_ENV, DEFAULT_RUN_ROOT))
        / f"{config.loss.primary}-{config.loss.consistency}-seed{config.train.seed}")
    state = None
    if args.resume:
        last = run_dir / "checkpoints" / "last.ckpt"
        if not last.exists():
            raise UsageError(f"cannot resume: {last} does not exist")
        state = load_state(last, tr, va)
        config = state.config
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config_echo(run_dir / "config.echo", config)
    result = train(config, tr, va, run_dir=run_dir, state=state)
    st = result.state
    print(f"run directory: {run_dir}")
    if st.best_epoch >= 0:
        print(f"best val mAP {st.best_map:.4f} at epoch {st.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    model, meta = load_model(ckpt)
    if "config" not in meta:
        raise UsageError(f"{ckpt} carries no training config; cannot rebuild the split")
    config = TrainConfig.from_flat(meta["config"])
    if args.data:
        config.data.path = str(Path(args.data).resolve())
    tr, va = prepare_data(config)
    records = {"train": tr, "val": va, "all": tr + va}[args.split]
    x, y, primary = evaluation_inputs(records, model.config.input_size, model.dtype)
    report = evaluate_model(model, x, y, primary, config.train.eval_batch_size)
    out = Path(args.out) if args.out else ckpt.parent / f"eval_{args.split}.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "metric", "value"])
        for m, v in report.rows():
            w.writerow([args.split, m, repr(v)])
    print(f"split={args.split} images={len(records)}")
    print(f"mAP={report.map!r}")
    print(f"top1={report.top1:.4f} real_top1={report.real_top1:.4f}")
    for k, v in report.map_by_count.items():
        print(f"mAP[{k} labels]={v:.4f}")
    print(f"report written to {out}")
    return 0


def _id_list(text: str | None) -> list[str] | None:
    return None if text is None else [t for t in text.split(",") if t]


def cmd_inspect_heatmaps(args) -> int:
    run_dir = Path(args.run_dir)
    path = run_dir / "heatmaps" / "store.bin"
    if not path.exists():
        raise UsageError(f"no heatmap store at {path}; was the run trained with loss.consistency=scl?")
    arrays, meta = containers.load(path)
    N, W, L = (int(v) for v in arrays["heatmaps.shape"])
    ids = list(meta["ids"])
    store = HeatmapStore(np.full((N, L), UNKNOWN), W)
    store.load_state(arrays)
    wanted = _id_list(args.samples) or ids[:4]
    index = {sid: n for n, sid in enumerate(ids)}
    missing = [s for s in wanted if s not in index]
    if missing:
        raise UsageError(f"unknown sample ids {missing}")
    classes = [int(c) for c in _id_list(args.classes)] if args.classes else list(range(L))
    bad = [c for c in classes if not 0 <= c < L]
    if bad:
        raise UsageError(f"class ids {bad} out of range for {L} classes")
    out = Path(args.out) if args.out else run_dir / "heatmaps" / "png"
    written = export_heatmaps(store, out, [index[s] for s in wanted], classes, ids)
    print(f"wrote {len(written)} images to {out}")
    return 0


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    p = _Parser(prog="singlepos", description="Single-positive multi-label training toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset directory")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--placement", choices=["uniform", "corners"], default="uniform")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model; extra --section.key value pairs override the config",
                       epilog="example: singlepos train --data ds --loss.primary en --loss.consistency scl")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--data", help="dataset directory (sets data.path)")
    t.add_argument("--run-dir", help=f"output directory (default: ${RUN_ROOT_ENV}/<loss>-<seed>)")
    t.add_argument("--resume", action="store_true", help="continue from checkpoints/last.ckpt")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default: the one used for training)")
    e.add_argument("--split", choices=["train", "val", "all"], default="val")
    e.add_argument("--out", help="report CSV (default: next to the checkpoint)")

    h = sub.add_parser("inspect-heatmaps", parents=[common], help="export stored heatmaps as grayscale PNGs")
    h.add_argument("run_dir")
    h.add_argument("--samples", help="comma-separated sample ids (default: first four)")
    h.add_argument("--classes", help="comma-separated class ids (default: all)")
    h.add_argument("--out", help="output directory (default: <run>/heatmaps/png)")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        if extra and args.command != "train":
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_inspect_heatmaps(args)
    except (UsageError, ConfigError, DataError, StoreError, containers.ContainerError,
            TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort guard for the exit code contract
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
