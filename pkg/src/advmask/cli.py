"""Command-line entry point: gen-data, pretrain, transfer, sweep, augment-preview.

Every command is deterministic given ``--seed`` and its inputs. Runtime
failures exit with status 1 and print one JSON object on stderr; usage errors
exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import tensor as T
from .augment import KINDS, LEADS, augment, parse_spec
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, SweepConfig
from .data import CHAPMAN_BALANCE, RHYTHMS, DatasetError, generate_synthetic_ecg, load_dataset, save_dataset
from .models import make_rng
from .training import (TrainingDiverged, pretrain, scarcity_sweep, train_scratch, transfer_train,
                       write_metrics_csv, write_sweep_outputs)

log = logging.getLogger("advmask")

BALANCES = {"chapman": CHAPMAN_BALANCE, "uniform": {r: 1 / len(RHYTHMS) for r in RHYTHMS}}


class UsageError(Exception):
    pass


def _fractions(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("--fractions needs at least one value, e.g. 1.0,0.1,0.01")
    try:
        values = tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--fractions: not a number list: {text!r}") from None
    if any(not 0 < v <= 1 for v in values):
        raise argparse.ArgumentTypeError(f"--fractions values must lie in (0, 1], got {text!r}")
    return values


def _aug(text: str) -> str:
    try:
        parse_spec(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("--seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="RunConfig JSON; command-line flags override it")
    common.add_argument("--seed", type=_u64, help="random seed (default: from config, else 0)")
    common.add_argument("--out", type=Path, help="output path")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="advmask", description="Adversarial masking for ECG self-supervised learning.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic 12-lead dataset")
    g.add_argument("--n", type=int, default=512, help="number of records")
    g.add_argument("--length", type=int, default=256, help="samples per lead")
    g.add_argument("--sampling-rate", type=float, default=125.0, help="Hz")
    g.add_argument("--balance", choices=sorted(BALANCES), default="chapman", help="rhythm class proportions")

    aug_help = f"augmentation name or '+' chain; kinds: {', '.join(KINDS[:-1])}"
    pt = sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining")
    pt.add_argument("--data", type=Path, help="dataset directory")
    pt.add_argument("--aug", type=_aug, help=aug_help)
    pt.add_argument("--n-masks", type=int, help="number of adversarial masks N")
    pt.add_argument("--max-epochs", type=int)
    pt.add_argument("--lr", type=float, help="learning rate for both players")
    pt.add_argument("--record-wall-time", action="store_true",
                    help="fill the wall_time_s metrics column (makes the CSV non-reproducible)")

    tr = sub.add_parser("transfer", parents=[common], help="linear probe on a frozen checkpoint encoder")
    tr.add_argument("--checkpoint", type=Path)
    tr.add_argument("--data", type=Path)
    tr.add_argument("--task", choices=("arrhythmia", "gender"))
    tr.add_argument("--fraction", type=float)
    tr.add_argument("--max-epochs", type=int)
    tr.add_argument("--scratch", action="store_true", help="train encoder and head end to end instead")

    sw = sub.add_parser("sweep", parents=[common], help="data-scarcity sweep over checkpoints, fractions, seeds")
    sw.add_argument("--checkpoint", action="append", default=[], metavar="[NAME=]PATH",
                    help="repeatable; NAME defaults to the checkpoint's augmentation")
    sw.add_argument("--data", type=Path)
    sw.add_argument("--fractions", type=_fractions)
    sw.add_argument("--seeds", type=int, help="number of seeds, counting up from --seed")
    sw.add_argument("--task", action="append", choices=("arrhythmia", "gender"), help="repeatable")
    sw.add_argument("--max-epochs", type=int)
    sw.add_argument("--scratch", action="store_true", help="add the end-to-end Scratch arm")
    sw.add_argument("--workers", type=int, help="parallel trials (capped by ADVMASK_THREADS)")

    pv = sub.add_parser("augment-preview", parents=[common], help="CSV of original and augmented traces")
    pv.add_argument("--data", type=Path)
    pv.add_argument("--record", help="record id (default: first record)")
    pv.add_argument("--aug", type=_aug, default="adversarial", help=aug_help)
    pv.add_argument("--checkpoint", type=Path, help="needed for adversarial masks")
    return p


# ------------------------------------------------------------------ helpers


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    seed = args.seed
    if seed is not None:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, seed=seed), transfer=replace(cfg.transfer, seed=seed))
    if getattr(args, "data", None):
        cfg.data = str(args.data)
    if getattr(args, "checkpoint", None) and not isinstance(args.checkpoint, list):
        cfg.checkpoint = str(args.checkpoint)
    return cfg


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required (or set it in --config)")
    return value


def _prepare_out(path: Path, force: bool, is_dir: bool = True) -> Path:
    if path.exists() and not force and (not is_dir or any(path.iterdir())):
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    if is_dir:
        path.mkdir(parents=True, exist_ok=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _workers(requested: int | None) -> int:
    cap = os.environ.get("ADVMASK_THREADS")
    cap = max(1, int(cap)) if cap else None
    n = requested if requested is not None else (cap or 1)
    return max(1, min(n, cap) if cap else n)


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> Path:
    out = _require(args.out, "--out")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    seed = args.seed if args.seed is not None else 0
    ds = generate_synthetic_ecg(args.n, BALANCES[args.balance], length=args.length,
                                sampling_rate_hz=args.sampling_rate, seed=seed)
    save_dataset(ds, out, force=args.force)
    log.info("wrote %d records to %s", len(ds), out)
    return out


def cmd_pretrain(args) -> Path:
    cfg = _run_config(args)
    pc = cfg.pretrain
    if args.aug:
        pc = replace(pc, augmentation=args.aug)
    if args.n_masks is not None:
        pc = replace(pc, n_masks=args.n_masks)
    if args.max_epochs is not None:
        pc = replace(pc, max_epochs=args.max_epochs)
    if args.lr is not None:
        pc = replace(pc, lr_encoder=args.lr, lr_adversary=args.lr)
    cfg.pretrain = pc
    pc.mask_config()  # validates n_masks early
    data = load_dataset(_require(cfg.data, "--data"))
    out = _prepare_out(_require(args.out, "--out"), args.force)
    ckpt = pretrain(pc, data, record_wall_time=args.record_wall_time)
    ckpt.save(out / "checkpoint.amck")
    write_metrics_csv(ckpt.metrics, out / "metrics.csv")
    (out / "config.json").write_text(cfg.dumps())
    log.info("pretrained %d epochs; outputs in %s", ckpt.epoch, out)
    return out


TRANSFER_FIELDS = ("arm", "task", "fraction", "seed", "n_train", "val_accuracy_pct", "test_accuracy_pct")


def cmd_transfer(args) -> Path:
    cfg = _run_config(args)
    tc = cfg.transfer
    for flag, key in (("task", "task"), ("fraction", "fraction"), ("max_epochs", "max_epochs")):
        if getattr(args, flag) is not None:
            tc = replace(tc, **{key: getattr(args, flag)})
    if not 0 < tc.fraction <= 1:
        raise UsageError(f"--fraction must lie in (0, 1], got {tc.fraction}")
    data = load_dataset(_require(cfg.data, "--data"))
    out = _prepare_out(_require(args.out, "--out"), args.force)
    if args.scratch:
        arm, n_train, val = "scratch", "", ""
        test = train_scratch(tc, data)
    else:
        ckpt = Checkpoint.load(_require(cfg.checkpoint, "--checkpoint"))
        res = transfer_train(tc, ckpt, data)
        arm, n_train, test = ckpt.augmentation or "checkpoint", res.n_train, res.test_accuracy
        val = f"{100 * res.val_accuracy:.4f}"
    with open(out / "transfer.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSFER_FIELDS)
        w.writerow([arm, tc.task, tc.fraction, tc.seed, n_train, val, f"{100 * test:.4f}"])
    log.info("%s %s fraction %g: test accuracy %.2f%%", arm, tc.task, tc.fraction, 100 * test)
    return out


def cmd_sweep(args) -> Path:
    cfg = _run_config(args)
    sc = cfg.sweep
    sc = SweepConfig(fractions=args.fractions or sc.fractions, seeds=args.seeds or sc.seeds,
                     tasks=tuple(args.task) if args.task else sc.tasks, scratch=args.scratch or sc.scratch)
    tc = cfg.transfer if args.max_epochs is None else replace(cfg.transfer, max_epochs=args.max_epochs)
    paths = list(args.checkpoint) or ([cfg.checkpoint] if cfg.checkpoint else [])
    if not paths and not sc.scratch:
        raise UsageError("sweep needs at least one --checkpoint (or --scratch)")
    checkpoints = {}
    for item in paths:
        name, _, path = item.rpartition("=")
        ckpt = Checkpoint.load(path)
        name = name or ckpt.augmentation or Path(path).stem
        if name in checkpoints:
            raise UsageError(f"duplicate checkpoint name {name!r}; use NAME=PATH")
        checkpoints[name] = ckpt
    data = load_dataset(_require(cfg.data, "--data"))
    out = _prepare_out(_require(args.out, "--out"), args.force)
    base_seed = tc.seed
    results = scarcity_sweep(checkpoints, data, sc.fractions, sc.tasks, tuple(range(base_seed, base_seed + sc.seeds)),
                             scratch=sc.scratch, base=tc, workers=_workers(args.workers))
    write_sweep_outputs(results, out)
    log.info("sweep: %d trials written to %s", len(results), out)
    return out


def cmd_augment_preview(args) -> Path:
    cfg = _run_config(args)
    data = load_dataset(_require(cfg.data, "--data"))
    if args.record:
        matches = [r for r in data.records if r.record_id == args.record]
        if not matches:
            raise DatasetError(f"record {args.record!r} not found")
        record = matches[0]
    else:
        record = data.records[0]
    spec = parse_spec(args.aug)
    uses_mask = "adversarial" in spec.name.split("+")
    mask_model = None
    if uses_mask:
        if not cfg.checkpoint:
            raise UsageError("adversarial preview needs --checkpoint with a trained mask generator")
        mask_model = Checkpoint.load(cfg.checkpoint).mask_model
        if mask_model is None:
            raise CheckpointError(f"{cfg.checkpoint} holds no mask generator")
    seed = args.seed if args.seed is not None else 0
    x = record.signal
    augmented = augment(x, spec, make_rng(seed), record.sampling_rate_hz, mask_model)
    masks = None
    if mask_model is not None:
        with T.no_grad():
            masks = mask_model(T.Tensor(x[None]), "eval").data[0]
    out = _prepare_out(_require(args.out, "--out"), args.force, is_dir=False)
    per_lead = masks is not None and masks.shape[0] == len(LEADS)
    lead_idx = list(range(len(LEADS))) if per_lead else [LEADS.index("II")]
    header = ["t"]
    for i in lead_idx:
        header += [f"lead_{LEADS[i]}_original", f"lead_{LEADS[i]}_augmented"]
    if masks is not None:
        header += [f"mask_{k}" for k in range(masks.shape[0])]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(x.shape[1]):
            row = [f"{t / record.sampling_rate_hz:.6f}"]
            for i in lead_idx:
                row += [f"{x[i, t]:.6g}", f"{augmented[i, t]:.6g}"]
            if masks is not None:
                row += [f"{v:.6g}" for v in masks[:, t]]
            w.writerow(row)
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "transfer": cmd_transfer,
    "sweep": cmd_sweep,
    "augment-preview": cmd_augment_preview,
}

_RUNTIME_ERRORS = (DatasetError, CheckpointError, ConfigError, TrainingDiverged, FileExistsError,
                   FileNotFoundError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.exit(2, f"{parser.prog} {args.command}: error: {exc}\n")
    except _RUNTIME_ERRORS as exc:
        err = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
