"""Command-line driver: ``giim {synth,train,eval,sweep,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

Records are printed (or written to ``--out``) as JSON lines:

* train: one ``{"epoch", "loss", "train_accuracy"}`` record per epoch
* eval: one ``{"accuracy", "auc_macro", "per_class_auc", "confusion", "n_targets", "mode"}`` record
* sweep: one ``{"imputer", "eta", "full_accuracy", "miss_accuracy", "full_auc", "miss_auc", "final_loss"}``
  record per cell, followed by an aligned table on stderr
* gradcheck: one ``{"passed", "max_rel_error", "per_layer", "tolerance", "seed", "redraws"}`` record
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SyntheticSpec, generate_synthetic, load_dataset, save_dataset, split_by_patient
from .errors import GiimError
from .experiments import IMPUTERS, SWEEP_ETAS, run_gradcheck, run_sweep
from .model import HIDDEN_WIDTHS
from .training import EvalMode, TrainConfig, evaluate, train


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _eta(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"eta must be in [0, 1], got {value}")
    return value


def _eta_list(text: str) -> list:
    return [_eta(x) for x in text.split(",") if x.strip()]


def _imputer_list(text: str) -> list:
    items = [x.strip() for x in text.split(",") if x.strip()]
    bad = [x for x in items if x not in IMPUTERS]
    if bad or not items:
        raise argparse.ArgumentTypeError(f"imputers must be among {list(IMPUTERS)}, got {text!r}")
    return items


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=_positive_int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--missing-view", default=None,
                   help="view name or index (default: the last view)")
    p.add_argument("--hidden", type=_int_list, default=list(HIDDEN_WIDTHS))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="giim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", choices=["lesion", "exam"], default="lesion")
    p.add_argument("--patients", type=_positive_int, default=100)
    p.add_argument("--lesions", type=_int_list, default=[1, 3], help="min,max lesions per patient")
    p.add_argument("--views", type=_positive_int, default=3)
    p.add_argument("--width", type=_positive_int, default=16)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--interaction", action="store_true")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eta", type=_eta, default=0.0)
    p.add_argument("--imputer", choices=IMPUTERS, default="constant")
    p.add_argument("--task", choices=["lesion", "exam"])
    p.add_argument("--out")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=[m.value for m in EvalMode], default="full")
    p.add_argument("--missing-view", default=None)
    p.add_argument("--task", choices=["lesion", "exam"])
    p.add_argument("--out")

    p = sub.add_parser("sweep", help="missing-view rate x imputer table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cases", required=True, help="training cases (or all cases with --test-fraction)")
    p.add_argument("--test-cases", help="held-out cases; default splits --cases by patient")
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--etas", type=_eta_list, default=list(SWEEP_ETAS))
    p.add_argument("--imputers", type=_imputer_list, default=list(IMPUTERS))
    p.add_argument("--task", choices=["lesion", "exam"])
    p.add_argument("--out")
    _add_train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of a reduced model")
    p.add_argument("--widths", type=_int_list, default=[8, 8, 8, 8, 8])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return parser


def _emit(records, out):
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _check_task(parser, args, manifest):
    if getattr(args, "task", None) and args.task != manifest.task:
        parser.error(f"--task {args.task} does not match the manifest task {manifest.task!r}")


def _missing_view(parser, manifest, value) -> int:
    if value is None:
        return manifest.n_views - 1
    try:
        return manifest.view_index(value)
    except GiimError as exc:
        parser.error(str(exc))


def _cmd_synth(parser, args):
    if len(args.lesions) != 2 or not 1 <= args.lesions[0] <= args.lesions[1]:
        parser.error("--lesions takes min,max with 1 <= min <= max")
    if args.classes < 2:
        parser.error("--classes must be >= 2")
    if args.noise < 0:
        parser.error("--noise must be >= 0")
    spec = SyntheticSpec(n_patients=args.patients, lesions_per_patient=tuple(args.lesions),
                         n_views=args.views, feature_width=args.width, n_classes=args.classes,
                         noise_sigma=args.noise, separation=args.separation,
                         interaction=args.interaction, task=args.task, seed=args.seed)
    save_dataset(generate_synthetic(spec), args.manifest, args.cases)


def _config(args, manifest, parser) -> TrainConfig:
    if any(w < 1 for w in args.hidden) or not args.hidden:
        parser.error("--hidden needs positive widths")
    if args.lr < 0:
        parser.error("--lr must be >= 0")
    return TrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                       missing_view=_missing_view(parser, manifest, args.missing_view),
                       hidden=tuple(args.hidden))


def _cmd_train(parser, args):
    dataset = load_dataset(args.manifest, args.cases)
    _check_task(parser, args, dataset.manifest)
    cfg = replace(_config(args, dataset.manifest, parser), eta=args.eta, imputer=args.imputer)
    result = train(dataset, cfg)
    save_checkpoint(args.checkpoint, result.model, dataset.manifest, result.imputer, seed=args.seed,
                    extra={"missing_view": cfg.missing_view, "eta": cfg.eta, "epochs": cfg.epochs,
                           "learning_rate": cfg.learning_rate})
    _emit(result.history, args.out)


def _cmd_eval(parser, args):
    dataset = load_dataset(args.manifest, args.cases)
    _check_task(parser, args, dataset.manifest)
    model, manifest, imputer, meta = load_checkpoint(args.checkpoint)
    if manifest != dataset.manifest:
        raise GiimError("the checkpoint manifest differs from the dataset manifest")
    if args.missing_view is None and "missing_view" in meta.get("extra", {}):
        missing = meta["extra"]["missing_view"]
    else:
        missing = _missing_view(parser, manifest, args.missing_view)
    report = evaluate(model, dataset, imputer, args.mode, missing)
    _emit([report.to_record()], args.out)


def _cmd_sweep(parser, args):
    dataset = load_dataset(args.manifest, args.cases)
    _check_task(parser, args, dataset.manifest)
    if args.test_cases:
        test = load_dataset(args.manifest, args.test_cases)
        train_set = dataset
    else:
        if not 0 < args.test_fraction < 1:
            parser.error("--test-fraction must be in (0, 1)")
        train_set, test = split_by_patient(dataset, args.test_fraction, args.seed)
    base = _config(args, dataset.manifest, parser)
    table = run_sweep(train_set, test, args.etas, args.imputers, base, seed=args.seed)
    _emit(table.records(), args.out)
    sys.stderr.write(table.render())


def _cmd_gradcheck(parser, args):
    if not args.widths or any(not 1 <= w < 16 for w in args.widths):
        parser.error("--widths must be integers in [1, 16)")
    report = run_gradcheck(args.widths, args.seed)
    _emit([report.to_record()], args.out)
    return 0 if report.passed else 1


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "eval": _cmd_eval,
            "sweep": _cmd_sweep, "gradcheck": _cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](parser, args) or 0
    except (GiimError, OSError) as exc:
        sys.stderr.write(f"giim {args.command}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
