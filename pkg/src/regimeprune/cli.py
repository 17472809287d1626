"""Command-line entry point: ``regimeprune <command> [options]``.

Every command reads the same flat config file (``--config``), applies
``--set key=value`` overrides, and prints the resolved config first so a run
can be repeated exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .data import DataSplit, IdxFormatError, cka_sample_set
from .harness.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .harness.config import ConfigError, SweepConfig
from .harness.emit import METRICS, emit_csv, emit_heatmap
from .harness.sweep import run_sweep
from .landscape import DegenerateOutputError, cka, lmc, retrain_twins
from .nn import StructureError, init_params
from .optimize import TrainingDiverged, train
from .prune import DegenerateLayerError, apply_mask, density, make_mask
from .regimes import (
    Candidate,
    NoViableRhoError,
    Probe,
    SuspiciousInputError,
    select_model_lmc_cka,
    select_model_lmc_error,
    tune_sam_rho,
    tune_temperature,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

RUNTIME_ERRORS = (
    TrainingDiverged, CheckpointError, DegenerateOutputError, DegenerateLayerError,
    NoViableRhoError, SuspiciousInputError, StructureError, IdxFormatError,
    FloatingPointError, OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_probe(config: SweepConfig, data: DataSplit) -> Probe:
    samples = cka_sample_set(data.train, config.cka_seed, config.cka_samples)
    return Probe(data, config.twin_seeds, config.lmc_grid_points, samples)


def _resolve_config(args) -> SweepConfig:
    if args.config is None:
        config = SweepConfig()
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {args.config}")
        config = SweepConfig.load(path)
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seeds=[{args.seed}]")
    if overrides:
        config = config.with_overrides(overrides)
    return config


def _print_config(config: SweepConfig) -> None:
    print("# resolved config")
    print(config.to_text(), end="")
    print("# end config")


def _run_seed(config: SweepConfig) -> int:
    return int(config.seeds[0])


def _metadata(config: SweepConfig, data: DataSplit, **extra) -> dict:
    model = config.model_config(data.dim, data.num_classes)
    meta = {
        "model_config": model.to_dict(),
        "dataset": config.dataset,
        "dataset_fingerprint": data.train.fingerprint(),
        "config": config.to_text(),
        "library_version": __version__,
    }
    meta.update(extra)
    return meta


def cmd_train(args, config: SweepConfig) -> int:
    data = config.build_data()
    seed = _run_seed(config)
    init = init_params(config.model_config(data.dim, data.num_classes), seed, config.np_dtype)
    spec = config.train_spec(seed)
    params, report = train(init, None, spec, data, tag="dense")
    print(f"seed={seed}")
    print(f"train_error={report.train_error!r}")
    print(f"test_error={report.test_error!r}")
    save_checkpoint(args.out, params, None, _metadata(config, data, train_spec=spec.to_dict(), seed=seed))
    print(f"checkpoint={args.out}")
    return EXIT_OK


def cmd_prune(args, config: SweepConfig) -> int:
    params, _, meta = load_checkpoint(args.input)
    spec = config.prune_spec()
    mask = make_mask(params, spec)
    pruned = apply_mask(params, mask)
    meta = dict(meta, prune_spec=spec.to_dict())
    save_checkpoint(args.out, pruned, mask, meta)
    print(f"density_all={density(mask, pruned)!r}")
    print(f"density_prunable={mask.prunable_density()!r}")
    print(f"checkpoint={args.out}")
    return EXIT_OK


def cmd_retrain(args, config: SweepConfig) -> int:
    params, mask, meta = load_checkpoint(args.input)
    if mask is None:
        raise UsageError(f"{args.input} carries no mask; run 'prune' first")
    data = config.build_data()
    seed = _run_seed(config)
    twin = config.twin_spec(seed)
    spec = twin.spec_for(0)
    out, report = train(params, mask, spec, data, tag="retrain")
    print(f"seed={spec.seed}")
    print(f"train_error={report.train_error!r}")
    print(f"test_error={report.test_error!r}")
    save_checkpoint(args.out, out, mask, dict(meta, retrain_spec=spec.to_dict()))
    print(f"checkpoint={args.out}")
    return EXIT_OK


def cmd_lmc(args, config: SweepConfig) -> int:
    a, _, _ = load_checkpoint(args.a)
    b, _, _ = load_checkpoint(args.b)
    data = config.build_data()
    result = lmc(a, b, data.train, args.grid or config.lmc_grid_points)
    print(f"lmc={result.value!r}")
    print(f"t_star={result.t_star!r}")
    for t, e in result.grid_errors:
        print(f"error_train[t={t:.4f}]={e!r}")
    return EXIT_OK


def cmd_cka(args, config: SweepConfig) -> int:
    a, _, _ = load_checkpoint(args.a)
    b, _, _ = load_checkpoint(args.b)
    data = config.build_data()
    samples = cka_sample_set(data.train, config.cka_seed, config.cka_samples)
    result = cka(a, b, samples)
    print(f"cka={result.value!r}")
    print(f"samples={result.sample_count}")
    print(f"sample_set={result.sample_set_id}")
    return EXIT_OK


def cmd_sweep(args, config: SweepConfig) -> int:
    diagram = run_sweep(config, workers=args.workers)
    for row in diagram.cells:
        for c in row:
            print(f"{config.temperature_knob}={c.temperature_value} {config.load_knob}={c.load_value} "
                  f"test_error={c.test_error:.4f} norm={c.normalized_error:.4f} "
                  f"lmc={c.lmc:+.4f} cka={c.cka:.4f} regime={c.regime} seeds={c.seed_count}")
    if args.csv:
        emit_csv(diagram, args.csv)
        print(f"csv={args.csv}")
    if args.svg_dir:
        out = Path(args.svg_dir)
        out.mkdir(parents=True, exist_ok=True)
        for metric in METRICS:
            emit_heatmap(diagram, metric, out / f"{metric}.svg")
        print(f"svg_dir={out}")
    return EXIT_OK


def cmd_tune_temp(args, config: SweepConfig) -> int:
    data = config.build_data()
    seed = _run_seed(config)
    init = init_params(config.model_config(data.dim, data.num_classes), seed, config.np_dtype)
    t0 = config.train_spec(seed)
    decision = tune_temperature(init, t0, config.prune_spec(), config.thresholds,
                                make_probe(config, data), args.knob, args.decrease)
    print(f"lmc={decision.lmc!r}")
    print(f"regime={'I' if decision.regime_i else 'II'}")
    print(f"changed={str(decision.changed).lower()}")
    for key, value in decision.spec.to_dict().items():
        print(f"tuned.{key}={json.dumps(value)}")
    return EXIT_OK


def cmd_select_model(args, config: SweepConfig) -> int:
    data = config.build_data()
    seed = _run_seed(config)
    probe = make_probe(config, data)
    init = init_params(config.model_config(data.dim, data.num_classes), seed, config.np_dtype)
    candidates = []
    for t in config.temperature_values:
        spec = config.train_spec(seed, t)
        dense, report = probe.train_dense(init, spec)
        candidates.append(Candidate(dense, spec, report.test_error))
        print(f"candidate[{len(candidates) - 1}] {config.temperature_knob}={t} "
              f"dense_test_error={report.test_error!r}")
    select = select_model_lmc_cka if args.method == "lmc-cka" else select_model_lmc_error
    result = select(candidates, config.prune_spec(), config.thresholds, probe)
    print(f"conventional_index={result.conventional_index}")
    print(f"lmc={result.lmc!r}")
    print(f"fallback={str(result.fallback).lower()}")
    print(f"probe_count={result.probe_count}")
    print(f"selected_index={result.index}")
    print(f"selected.{config.temperature_knob}={config.temperature_values[result.index]}")
    return EXIT_OK


def cmd_tune_rho(args, config: SweepConfig) -> int:
    data = config.build_data()
    seed = _run_seed(config)
    init = init_params(config.model_config(data.dim, data.num_classes), seed, config.np_dtype)
    result = tune_sam_rho(init, list(config.rho_grid), config.train_spec(seed),
                          config.prune_spec(), make_probe(config, data), config.thresholds)
    for rho, value in result.cka_by_rho.items():
        print(f"cka[rho={rho}]={value!r}")
    for rho in result.failed:
        print(f"failed[rho={rho}]=diverged")
    print(f"rho={result.rho!r}")
    return EXIT_OK


def cmd_inspect(args, config: SweepConfig) -> int:
    header = read_header(args.checkpoint)
    print(f"format_version={header.version}")
    print(f"dtype={header.dtype}")
    print(f"m={header.m}")
    for i, layer in enumerate(header.layers):
        print(f"layer[{i}]={layer['out']}x{layer['in']} prunable={str(layer['prunable']).lower()}")
    if header.mask_layers is None:
        print("mask=none")
    else:
        print(f"density_all={header.density_all()!r}")
        print(f"density_prunable={header.density_prunable()!r}")
    for key in sorted(header.metadata):
        value = header.metadata[key]
        if key == "config":
            continue
        if not isinstance(value, str):
            value = json.dumps(value, sort_keys=True)
        print(f"meta.{key}={value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regimeprune", description="Train, prune and diagnose sparse networks.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        if config:
            p.add_argument("--config", help="flat key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config field (repeatable)")
            p.add_argument("--seed", type=int, help="run seed (replaces the seeds list)")
        return p

    p = add("train", cmd_train, "train a dense model")
    p.add_argument("--out", required=True)
    p = add("prune", cmd_prune, "magnitude-prune a checkpoint")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p = add("retrain", cmd_retrain, "retrain a pruned checkpoint under its mask")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p = add("lmc", cmd_lmc, "linear mode connectivity of two checkpoints")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--grid", type=int)
    p = add("cka", cmd_cka, "CKA similarity of two checkpoints")
    p.add_argument("a")
    p.add_argument("b")
    p = add("sweep", cmd_sweep, "temperature x load sweep")
    p.add_argument("--workers", type=int)
    p.add_argument("--csv")
    p.add_argument("--svg-dir")
    p = add("tune-temp", cmd_tune_temp, "LMC-guided temperature tuning")
    p.add_argument("--knob", choices=("epochs", "batch_size", "rho"), default="epochs")
    p.add_argument("--decrease", action="store_true",
                   help="step the temperature down when the pruned model is well connected")
    p = add("select-model", cmd_select_model, "pick the dense model to prune")
    p.add_argument("--method", choices=("lmc-error", "lmc-cka"), default="lmc-error")
    add("tune-rho", cmd_tune_rho, "choose the SAM rho with the highest pruned CKA")
    p = add("inspect", cmd_inspect, "describe a checkpoint without loading its payload", config=False)
    p.add_argument("checkpoint")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = _resolve_config(args) if hasattr(args, "config") else SweepConfig()
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if hasattr(args, "config"):
        _print_config(config)
    try:
        return args.func(args, config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
