"""Command-line interface.

Exit codes: 0 success, 1 user error, 2 verification failure, 3 I/O or
corruption.  Every failure also prints one JSON line on stderr of the form
``{"error": <kind>, "exit_code": <n>, "message": <text>}``.

Every flag can also be set from a ``--config`` file: keys in ``[common]``
apply to all commands, keys in a section named after the command apply to
that command only, and flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adapters import STRATEGIES, AdaptationPolicy, count_adapter_params, inject
from .data import GENERATORS, SyntheticTaskSpec, generate_dataset, standard_tasks
from .io import (
    ContainerError,
    FingerprintError,
    attach,
    bundle_from_model,
    load_adapter_bundle,
    load_checkpoint,
    load_config,
    save_adapter_bundle,
    save_checkpoint,
)
from .models import ModelConfig, build_mini_hybrid, build_mini_vit
from .sparsity import SparseMergeError, apply_mask, compose_with_adapters, magnitude_prune, measured_sparsity
from .tensor import ShapeError
from .training import TrainConfig, adapt_task, default_grid, evaluate, make_grid, pretrain_backbone, write_results_csv

EXIT_OK, EXIT_USER, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USER, kind: str = "usage"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).split(",") if x.strip()]


def _resolve_task(name: str, seed: int | None, n_train: int | None) -> SyntheticTaskSpec:
    """A standard task by label, or any generator name."""
    overrides = {} if n_train is None else {"n_train": n_train}
    for spec in standard_tasks(**overrides):
        if spec.label == name:
            return spec if seed is None else replace(spec, seed=seed)
    if name in GENERATORS:
        return SyntheticTaskSpec(kind=name, seed=0 if seed is None else seed, name=name, **overrides)
    raise CliError(f"unknown task {name!r}; choose one of {', '.join(GENERATORS)}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> dict:
    trained, res, spec = pretrain_backbone(args.arch, args.epochs, args.n_train, args.resolution, args.lr, args.wd, args.seed)
    size = save_checkpoint(args.out, trained, extra={"pretrain": {"task": spec.to_dict(), "best_val": res.best_val}})
    return {"checkpoint": str(args.out), "bytes": size, "best_val": res.best_val, "params": trained.num_parameters()}


def cmd_prune(args) -> dict:
    if not 0.0 <= args.sparsity < 1.0:
        raise CliError("--sparsity must lie in [0, 1)")
    graph = load_checkpoint(args.checkpoint)
    sparse = apply_mask(graph, magnitude_prune(graph, args.sparsity, args.granularity))
    size = save_checkpoint(args.out, sparse)
    return {"checkpoint": str(args.out), "bytes": size, "sparsity": measured_sparsity(sparse)}


def _policy(args) -> AdaptationPolicy:
    return AdaptationPolicy(args.strategy, args.rank, args.conv_rank, args.scale)


def cmd_adapt(args) -> dict:
    backbone = load_checkpoint(args.checkpoint)
    spec = _resolve_task(args.task, args.task_seed, args.n_train)
    data = generate_dataset(spec)
    policy = _policy(args)
    base = TrainConfig(epochs=args.epochs, seed=args.seed)
    if args.head_lr is None and args.adapter_lr is None and args.wd is None:
        grid = default_grid(policy, args.epochs, base)
    else:
        defaults = default_grid(policy, args.epochs, base)
        heads = _floats(args.head_lr) if args.head_lr is not None else sorted({c.head_lr for c in defaults})
        sides = _floats(args.adapter_lr) if args.adapter_lr is not None else sorted({c.adapter_lr for c in defaults})
        wds = _floats(args.wd) if args.wd is not None else sorted({c.weight_decay for c in defaults})
        grid = make_grid(heads, sides, wds, base)
    seeds = _ints(args.search_seeds)
    final_seeds = _ints(args.final_seeds)
    res = adapt_task(backbone, policy, data, spec.num_classes, grid, seeds, final_seeds)
    model = res.models[0]
    test_row = res.test_rows[0]
    info = {"task_spec": spec.to_dict(), "seed": final_seeds[0], "test_accuracy": test_row["accuracy"], "train": res.best_config.to_dict()}
    bundle = bundle_from_model(model, backbone, spec.label, info)
    stats = save_adapter_bundle(args.out, bundle)
    if args.csv:
        write_results_csv(args.csv, res.all_rows)
    return {
        "bundle": str(args.out),
        "csv": str(args.csv) if args.csv else None,
        "policy": policy.label(),
        "task": spec.label,
        "test_mean": res.test_mean,
        "test_accuracy_seed": {"seed": final_seeds[0], "accuracy": test_row["accuracy"]},
        "best_config": {"head_lr": res.best_config.head_lr, "adapter_lr": res.best_config.adapter_lr, "wd": res.best_config.weight_decay},
        **stats,
    }


def cmd_merge(args) -> dict:
    backbone = load_checkpoint(args.checkpoint)
    bundle = load_adapter_bundle(args.bundle)
    model = attach(backbone, bundle)
    try:
        merged = compose_with_adapters(model, force_dense=args.force_dense)
    except SparseMergeError as exc:
        raise CliError(str(exc), EXIT_USER, "sparse-merge-refused") from None
    size = save_checkpoint(args.out, merged.graph)
    return {"checkpoint": str(args.out), "bytes": size, "dense_override": merged.dense_override}


def cmd_eval(args) -> dict:
    backbone = load_checkpoint(args.checkpoint)
    if args.bundle:
        bundle = load_adapter_bundle(args.bundle)
        model = attach(backbone, bundle)
        spec_dict = bundle.info.get("task_spec")
        spec = SyntheticTaskSpec.from_dict(spec_dict) if spec_dict and not args.task else None
    else:
        model = inject(backbone, AdaptationPolicy("linear_probe"))
        spec = None
    if spec is None:
        if not args.task:
            raise CliError("--task is required when the bundle does not record its task")
        spec = _resolve_task(args.task, args.task_seed, args.n_train)
    split = generate_dataset(spec)[args.split]
    metrics = evaluate(model, split)
    return {"task": spec.label, "split": args.split, **metrics}


def cmd_count_params(args) -> dict:
    if args.checkpoint:
        graph = load_checkpoint(args.checkpoint)
    else:
        build = build_mini_vit if args.arch == "vit" else build_mini_hybrid
        graph = build(ModelConfig())
    counts = count_adapter_params(_policy(args), graph)
    return {"policy": _policy(args).label(), **counts}


def cmd_verify(args) -> dict:
    from .verify import run_all

    reports = run_all(quick=args.quick, seed=args.seed)
    for r in reports:
        print(r.line(), file=sys.stderr if args.json else sys.stdout)
    failed = [r.name for r in reports if not r.passed]
    result = {"suites": {r.name: {"passed": r.passed, "cases": r.cases, "worst": r.worst} for r in reports}}
    if failed:
        raise CliError(f"suites failed: {', '.join(failed)}", EXIT_VERIFY, "verification-failed")
    return result


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _policy_flags(p: argparse.ArgumentParser, strategy_required: bool) -> None:
    p.add_argument("--strategy", choices=STRATEGIES, required=strategy_required)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--conv-rank", type=int, default=1)
    p.add_argument("--scale", type=float, default=1.0)


def _task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", help=f"standard task label or generator ({', '.join(GENERATORS)})")
    p.add_argument("--task-seed", type=int, default=None)
    p.add_argument("--n-train", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    # accepted both before and after the command name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="key = value file with [common] and per-command sections")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="print results as one JSON object")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(
        prog="petah", description="Low-rank adaptation toolkit for small hybrid vision models.", parents=[common]
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser  # type: ignore[method-assign]

    p = sub.add_parser("pretrain", help="train a backbone on the synthetic base task")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--arch", choices=("hybrid", "vit"), default="hybrid")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--n-train", type=int, default=4000)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--wd", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("prune", help="magnitude-prune a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--granularity", choices=("per-layer", "global"), default="per-layer")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("adapt", help="grid-search and train one strategy on one task")
    p.add_argument("--checkpoint", type=Path, required=True)
    _policy_flags(p, strategy_required=True)
    _task_flags(p)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--head-lr", help="comma-separated grid axis")
    p.add_argument("--adapter-lr", help="comma-separated grid axis")
    p.add_argument("--wd", help="comma-separated grid axis")
    p.add_argument("--search-seeds", default="0")
    p.add_argument("--final-seeds", default="0,1,2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="adapter bundle path")
    p.add_argument("--csv", type=Path, help="results table path")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("merge", help="fold a bundle into its backbone and write a dense checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force-dense", action="store_true")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="report accuracies of a bundle (or a bare checkpoint) on a split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--bundle", type=Path)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    _task_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", help="adapter parameter breakdown without training")
    _policy_flags(p, strategy_required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--arch", choices=("hybrid", "vit"), default="hybrid")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("verify", help="run the merge, gradient and roundtrip property suites")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install config-file values as parser defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, rest = pre.parse_known_args(argv)
    if known.config is None:
        return
    sections = load_config(known.config)
    command = next((a for a in rest if not a.startswith("-")), None)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if command not in sub.choices:
        return
    target = sub.choices[command]
    dests = {a.dest: a for a in target._actions}
    values = {**sections.get("common", {}), **sections.get(command, {})}
    unknown = sorted(k for k in values if k not in dests)
    if unknown and command in sections:
        stray = [k for k in unknown if k in sections[command]]
        if stray:
            raise CliError(f"config section [{command}] has unknown keys: {', '.join(stray)}")
    defaults = {}
    for key, value in values.items():
        action = dests.get(key)
        if action is None:
            continue
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        if isinstance(action, argparse._StoreTrueAction):
            if not isinstance(value, bool):
                raise CliError(f"config value {key} must be true or false")
        elif action.type is not None:
            value = action.type(str(value))
        elif not isinstance(value, str):
            value = str(value)
        if action.choices is not None and value not in action.choices:
            raise CliError(f"config value {key} = {value!r} not in {list(action.choices)}")
        action.required = False
        defaults[key] = value
    target.set_defaults(**defaults)


def _emit(result: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(result, default=str))
        return
    for key, value in result.items():
        if isinstance(value, dict):
            print(f"{key}:")
            for k, v in value.items():
                print(f"  {k}: {v}")
        else:
            print(f"{key}: {value}")


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (CliError, OSError, ValueError) as exc:
        code = exc.code if isinstance(exc, CliError) else EXIT_USER
        return _fail("config", code, str(exc))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        return _fail("usage", EXIT_USER, "invalid command line (see usage above)")
    args.json = getattr(args, "json", False)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(message)s")
    np.seterr(all="ignore")
    try:
        result = args.func(args)
    except CliError as exc:
        return _fail(exc.kind, exc.code, str(exc))
    except (ContainerError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail("io", EXIT_IO, str(exc))
    except FingerprintError as exc:
        return _fail("fingerprint-mismatch", EXIT_USER, str(exc))
    except (ShapeError, KeyError, ValueError) as exc:
        return _fail("invalid-input", EXIT_USER, str(exc))
    _emit(result, args.json)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
