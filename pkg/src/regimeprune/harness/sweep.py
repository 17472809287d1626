"""(temperature x load) sweeps producing phase diagrams."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..data import DataSplit, cka_sample_set
from ..landscape import DegenerateOutputError, measure_pruned
from ..nn import ParamSet, classification_error, init_params
from ..optimize import TrainingDiverged, train
from ..prune import DegenerateLayerError, density
from ..regimes import SuspiciousInputError, classify_regime
from .config import SweepConfig

log = logging.getLogger(__name__)

_FAILURES = (TrainingDiverged, DegenerateOutputError, DegenerateLayerError, FloatingPointError)
NAN = float("nan")


@dataclass
class SeedResult:
    seed: int
    test_error: float
    train_error: float
    lmc: float
    cka: float
    regime: str = ""
    diverged: bool = False
    reason: str = ""
    dense_test_error: float = NAN
    density_all: float = NAN
    density_prunable: float = NAN
    seconds: float = 0.0


@dataclass
class CellResult:
    temperature_value: float
    load_value: float
    test_error: float
    train_error: float
    lmc: float
    cka: float
    regime: str
    seed_count: int
    per_seed: list[SeedResult] = field(default_factory=list)
    dense_test_error: float = NAN
    seconds: float = 0.0
    normalized_error: float = NAN

    @property
    def diverged(self) -> bool:
        return self.seed_count == 0


@dataclass
class PhaseDiagram:
    temperature_knob: str
    temperature_values: list
    load_knob: str
    load_values: list
    cells: list[list[CellResult]]  # [temperature index][load index]
    column_valid: list[bool] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.temperature_values), len(self.load_values)

    def cell(self, t_index: int, l_index: int) -> CellResult:
        return self.cells[t_index][l_index]

    def column(self, l_index: int) -> list[CellResult]:
        return [row[l_index] for row in self.cells]

    def metric(self, name: str) -> np.ndarray:
        return np.array([[getattr(c, name) for c in row] for row in self.cells], dtype=float)


def normalize_columns(diagram: PhaseDiagram) -> PhaseDiagram:
    """Subtract each load column's lowest test error; fully diverged columns become invalid."""
    cells = [[replace(c) for c in row] for row in diagram.cells]
    valid = []
    for j in range(len(diagram.load_values)):
        errors = [cells[i][j].test_error for i in range(len(cells)) if not cells[i][j].diverged]
        errors = [e for e in errors if not math.isnan(e)]
        valid.append(bool(errors))
        best = min(errors) if errors else NAN
        for i in range(len(cells)):
            c = cells[i][j]
            c.normalized_error = c.test_error - best if errors and not c.diverged else NAN
    return replace(diagram, cells=cells, column_valid=valid)


# -- task functions (module level so they pickle for worker processes) --------

_DATA_CACHE: dict[str, tuple[DataSplit, np.ndarray]] = {}


def _data_for(config: SweepConfig) -> tuple[DataSplit, np.ndarray]:
    key = config.to_text()
    if key not in _DATA_CACHE:
        data = config.build_data()
        samples = cka_sample_set(data.train, config.cka_seed, config.cka_samples)
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = (data, samples)
    return _DATA_CACHE[key]


def _model_load(config: SweepConfig, load_value):
    return load_value if config.load_knob in ("width_scale", "depth") else None


def _dense_task(config: SweepConfig, temperature_value, model_load, seed: int):
    data, _ = _data_for(config)
    model = config.model_config(data.dim, data.num_classes, model_load)
    init = init_params(model, seed, config.np_dtype)
    spec = config.train_spec(seed, temperature_value)
    try:
        dense, report = train(init, None, spec, data, tag="dense")
    except _FAILURES as exc:
        return None, NAN, f"dense: {exc}"
    return dense, report.test_error, ""


def _cell_task(config: SweepConfig, dense: ParamSet | None, dense_error: float,
               dense_reason: str, load_value, seed: int) -> SeedResult:
    start = time.perf_counter()
    if dense is None:
        return SeedResult(seed, NAN, NAN, NAN, NAN, diverged=True, reason=dense_reason)
    data, samples = _data_for(config)
    try:
        m = measure_pruned(dense, config.prune_spec(load_value), config.twin_spec(seed),
                           data, samples, config.lmc_grid_points)
    except _FAILURES as exc:
        return SeedResult(seed, NAN, NAN, NAN, NAN, diverged=True, reason=str(exc),
                          dense_test_error=dense_error)
    return SeedResult(
        seed,
        test_error=m.test_error,
        train_error=m.train_error,
        lmc=m.lmc.value,
        cka=m.cka.value,
        dense_test_error=dense_error,
        density_all=density(m.mask, dense),
        density_prunable=m.mask.prunable_density(),
        seconds=time.perf_counter() - start,
    )


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else NAN


def _label(lmc_value: float, cka_value: float, config: SweepConfig, reference) -> str:
    if math.isnan(lmc_value):
        return "diverged"
    try:
        return classify_regime(lmc_value, cka_value, config.thresholds, reference).label
    except SuspiciousInputError:
        return "suspicious"


def _map(fn, arg_lists, workers: int):
    if workers <= 1:
        return [fn(*args) for args in arg_lists]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for args in arg_lists]
        return [f.result() for f in futures]


def run_sweep(config: SweepConfig, workers: int | None = None) -> PhaseDiagram:
    """Train each dense model once per (temperature, model shape, seed), then prune per load.

    Results are assembled in grid order, so they do not depend on the worker
    count or completion order.
    """
    workers = config.workers if workers is None else workers
    t_vals, l_vals, seeds = config.temperature_values, config.load_values, config.seeds

    model_loads = sorted({_model_load(config, l) for l in l_vals}, key=lambda v: (v is not None, v))
    dense_keys = list(dict.fromkeys((t, ml, s) for t in t_vals for ml in model_loads for s in seeds))
    log.info("training %d dense models", len(dense_keys))
    dense_out = _map(_dense_task, [(config, t, ml, s) for t, ml, s in dense_keys], workers)
    dense = dict(zip(dense_keys, dense_out))

    cell_keys = list(dict.fromkeys((t, l, s) for t in t_vals for l in l_vals for s in seeds))
    log.info("measuring %d pruned cells", len(cell_keys))
    args = []
    for t, l, s in cell_keys:
        params, err, reason = dense[(t, _model_load(config, l), s)]
        args.append((config, params, err, reason, l, s))
    seed_results = dict(zip(cell_keys, _map(_cell_task, args, workers)))

    cells = []
    for t in t_vals:
        row = []
        for l in l_vals:
            per_seed = [seed_results[(t, l, s)] for s in seeds]
            ok = [r for r in per_seed if not r.diverged]
            row.append(CellResult(
                temperature_value=t,
                load_value=l,
                test_error=_mean([r.test_error for r in ok]),
                train_error=_mean([r.train_error for r in ok]),
                lmc=_mean([r.lmc for r in ok]),
                cka=_mean([r.cka for r in ok]),
                regime="",
                seed_count=len(ok),
                per_seed=per_seed,
                dense_test_error=_mean([r.dense_test_error for r in per_seed
                                        if not math.isnan(r.dense_test_error)]),
                seconds=sum(r.seconds for r in per_seed),
            ))
        cells.append(row)

    # II-A / II-B split against each load column's median CKA
    for j in range(len(l_vals)):
        column = [cells[i][j] for i in range(len(t_vals))]
        ckas = [c.cka for c in column if not c.diverged]
        reference = float(np.median(ckas)) if ckas else None
        for c in column:
            c.regime = _label(c.lmc, c.cka, config, reference)
            for r in c.per_seed:
                r.regime = _label(r.lmc, r.cka, config, reference)

    diagram = PhaseDiagram(config.temperature_knob, list(t_vals), config.load_knob, list(l_vals), cells)
    return normalize_columns(diagram)
