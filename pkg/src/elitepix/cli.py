"""Command line front end: synth, label, train, predict, evaluate.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__, classical_selector, inference, metrics, stack_io, synth, train
from .nn import CheckpointError, ShapeError, init_params, load_checkpoint, save_checkpoint
from .nn import UsageError as ModelUsageError


THREADS_ENV = "ELITE_PIXEL_THREADS"
log = logging.getLogger("elitepix")


class UsageError(Exception):
    """Bad invocation detected after argument parsing (missing file, bad config)."""


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_json(path, what: str) -> dict:
    try:
        with open(_need_file(path, what)) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{what} {path} must hold a JSON object")
    return raw


def _with_suffix(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    raw = _load_json(args.spec, "scene spec")
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = synth.scene_spec_from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad scene spec {args.spec}: {exc}") from None
    stack, truth = synth.generate_scene(spec)
    prefix = Path(args.out)
    stack_io.write_stack(stack, prefix.with_name(prefix.name + ".tsstack"))
    stack_io.write_mask(truth, prefix.with_name(prefix.name + ".mask"))
    print(f"seed {spec.seed}")
    print(f"size {spec.height}x{spec.width}, epochs {spec.epochs}")
    for name, count in synth.class_histogram(spec.region_map).items():
        print(f"{name:<13} {count}")
    return 0


def cmd_label(args) -> int:
    stack = stack_io.read_stack(_need_file(args.stack, "stack"))
    cfg = classical_selector.SelectorConfig()
    if args.config:
        try:
            cfg = classical_selector.SelectorConfig.from_dict(_load_json(args.config, "selector config"))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad selector config {args.config}: {exc}") from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", classical_selector.EmptyPSWarning)
        sel = classical_selector.select_elite(stack, cfg)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    stack_io.write_mask(sel.mask, args.out)
    for name, count in sel.counts().items():
        print(f"{name:<12} {count}")
    print(f"density      {metrics.format_percent(metrics.pixel_density(sel.mask))}")
    return 0


def _training_data(pairs, hp: train.HyperParams) -> train.LabeledPatches:
    parts = []
    for stack_path, mask_path in pairs:
        stack = stack_io.read_stack(_need_file(stack_path, "stack"))
        mask = stack_io.read_mask(_need_file(mask_path, "mask"))
        parts.append(train.LabeledPatches.from_stack(stack, mask, hp.features, hp.sample_epochs))
    return train.LabeledPatches.concat(parts)


def cmd_train(args) -> int:
    raw = _load_json(args.config, "training config") if args.config else {}
    transfer_from = args.transfer_from or raw.pop("transfer_from", None)
    raw.pop("checkpoint", None)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        hp = train.HyperParams.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None
    data = _training_data(args.data, hp)
    if transfer_from:
        model = train.load_for_transfer(_need_file(transfer_from, "checkpoint"), hp, data.x.shape[-1])
    else:
        model = init_params(hp.model_config(), hp.seed)
    history_path = Path(args.history) if args.history else _with_suffix(args.out, ".history.csv")
    t0 = time.perf_counter()
    try:
        best, history = train.fit(model, data, hp)
    except train.TrainingDiverged as exc:
        save_checkpoint(args.out, exc.model)
        train.write_history(history_path, exc.history)
        print(f"error: {exc}; last good checkpoint written to {args.out}", file=sys.stderr)
        return 1
    save_checkpoint(args.out, best)
    train.write_history(history_path, history)
    if history and not args.no_figures:
        from . import plotting
        plotting.loss_curve(history, _with_suffix(history_path, ".png"))
    if history:
        best_row = min(history, key=lambda r: r["val_loss"])
        print(f"epochs {len(history)}, best epoch {best_row['epoch']}, "
              f"val loss {best_row['val_loss']:.4f}, val F1 {best_row['val_f1']:.4f}")
    print(f"training time {time.perf_counter() - t0:.1f} s")
    return 0


def cmd_predict(args) -> int:
    stack = stack_io.read_stack(_need_file(args.stack, "stack"))
    model, _ = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError(f"--threshold must lie in [0, 1], got {args.threshold}")
    sample = train.HyperParams().sample_epochs if args.sample_epochs is None else args.sample_epochs
    t0 = time.perf_counter()
    prob = inference.predict_probability(model, stack, sample or None, args.batch_size)
    mask = inference.threshold_mask(prob, args.threshold)
    elapsed = time.perf_counter() - t0
    stack_io.write_mask(mask, args.out)
    print(f"size {stack.shape[0]}x{stack.shape[1]}, elite {int(mask.elite.sum())}, "
          f"density {metrics.format_percent(metrics.pixel_density(mask))}")
    print(f"prediction time {elapsed:.2f} s")
    return 0


def cmd_evaluate(args) -> int:
    pred = stack_io.read_mask(_need_file(args.pred, "predicted mask"))
    truth = stack_io.read_mask(_need_file(args.truth, "reference mask"))
    rep = metrics.report(pred, truth, args.rounding)
    Path(args.out).write_text(metrics.report_json(rep))
    csv_path = Path(args.csv) if args.csv else _with_suffix(args.out, ".csv")
    csv_path.write_text(metrics.report_csv(rep, args.scene or Path(args.pred).stem))
    if not args.no_figures:
        from . import plotting
        plotting.score_chart(rep, _with_suffix(args.out, ".png"), args.scene or "")
    for name in metrics.SCORE_NAMES:
        flag = " (undefined)" if name in rep["undefined"] else ""
        print(f"{name:<10} {rep['scores'][name]}{flag}")
    print(f"density    pred {rep['density']['pred']}  truth {rep['density']['truth']}")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elitepix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"cap BLAS threads (fallback: ${THREADS_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic stack and its truth mask")
    p.add_argument("spec", help="scene spec JSON")
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX.tsstack and PREFIX.mask")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", help="classical PS/DS selection")
    p.add_argument("stack")
    p.add_argument("--config", help="selector config JSON")
    p.add_argument("--out", required=True, help="output mask")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="fit the network on labeled stacks")
    p.add_argument("--data", nargs=2, action="append", required=True, metavar=("STACK", "MASK"),
                   help="stack and label mask; repeat for several scenes")
    p.add_argument("--config", help="training config JSON (hyperparameters)")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--history", help="history CSV (default: next to the checkpoint)")
    p.add_argument("--transfer-from", help="start from this checkpoint's parameters")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-figures", action="store_true", help="skip the loss-curve PNG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="elite-pixel mask from a trained checkpoint")
    p.add_argument("stack")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="output mask")
    p.add_argument("--threshold", type=float, default=0.5, help="elite iff probability > threshold")
    p.add_argument("--sample-epochs", type=int, default=None,
                   help="temporally sample to this many epochs (default: the training default; 0 keeps all)")
    p.add_argument("--batch-size", type=int, default=4)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="scores of a predicted mask against a reference")
    p.add_argument("pred")
    p.add_argument("truth")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--csv", help="CSV row (default: next to the report)")
    p.add_argument("--scene", help="scene name for the CSV row and figure title")
    p.add_argument("--rounding", choices=("truncate", "half_up"), default="truncate")
    p.add_argument("--no-figures", action="store_true", help="skip the score bar chart")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"${THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        threads = _threads(args)
        if threads is not None and threads < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (stack_io.StackFormatError, stack_io.StructuralError, CheckpointError, ShapeError,
            ModelUsageError, ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
