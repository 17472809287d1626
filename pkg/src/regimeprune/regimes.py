"""Three-regime classification and the regime-driven tuning/selection procedures.

All procedures talk to the train/prune/retrain pipeline through a
:class:`Probe`, so they can be run against a real dataset or a scripted fake.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .data import DataSplit, cka_sample_set
from .landscape import (
    DEFAULT_GRID,
    DegenerateOutputError,
    TwinSpec,
    measure_pruned,
)
from .nn import ParamSet
from .optimize import TrainReport, TrainSpec, TrainingDiverged, train
from .prune import PruneSpec

log = logging.getLogger(__name__)

REGIME_I = "I"
REGIME_II = "II"
REGIME_II_A = "II-A"
REGIME_II_B = "II-B"

KNOBS = ("epochs", "batch_size", "rho")

# linear LMC is <= 0 up to evaluation noise
LMC_SLACK = 0.01


class SuspiciousInputError(ValueError):
    pass


class NoViableRhoError(RuntimeError):
    pass


@dataclass(frozen=True)
class Thresholds:
    epsilon: float = -0.05
    alpha: int = 2
    epoch_factor: float = 0.5
    batch_factor: float = 0.5
    rho_factor: float = 2.0
    rho_start: float = 0.1

    def __post_init__(self):
        if self.epsilon >= 0:
            raise ValueError(f"epsilon must be negative, got {self.epsilon}")
        if self.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if not (0 < self.epoch_factor < 1 and 0 < self.batch_factor < 1 and self.rho_factor > 1):
            raise ValueError("temperature step factors must move strictly")


@dataclass(frozen=True)
class RegimeLabel:
    label: str
    lmc: float
    cka: float | None

    @property
    def well_connected(self) -> bool:
        return self.label != REGIME_I

    @property
    def sublabel_determined(self) -> bool:
        return self.label != REGIME_II

    def __str__(self) -> str:
        return self.label


def classify_regime(lmc_value: float, cka_value: float | None,
                    thresholds: Thresholds = Thresholds(),
                    cka_reference: float | None = None) -> RegimeLabel:
    """Regime I if ``lmc < epsilon``; otherwise II-B when CKA reaches the reference, else II-A.

    Without a reference the II-A/II-B boundary is left open and the coarse
    label ``"II"`` is returned.
    """
    if lmc_value > LMC_SLACK:
        raise SuspiciousInputError(
            f"lmc {lmc_value} > {LMC_SLACK}: linear connectivity should not be positive"
        )
    if lmc_value < thresholds.epsilon:
        return RegimeLabel(REGIME_I, lmc_value, cka_value)
    if cka_reference is None or cka_value is None:
        return RegimeLabel(REGIME_II, lmc_value, cka_value)
    label = REGIME_II_B if cka_value >= cka_reference else REGIME_II_A
    return RegimeLabel(label, lmc_value, cka_value)


def raise_temperature(spec: TrainSpec, knob: str, thresholds: Thresholds = Thresholds()) -> TrainSpec:
    """One temperature step up on a single knob: fewer epochs, smaller batch, or larger rho."""
    if knob == "epochs":
        epochs = int(spec.epochs * thresholds.epoch_factor)
        if epochs < 1 or epochs >= spec.epochs:
            raise ValueError(f"cannot lower epochs below {spec.epochs}")
        return spec.with_epochs(epochs)
    if knob == "batch_size":
        batch = int(spec.batch_size * thresholds.batch_factor)
        if batch < 1 or batch >= spec.batch_size:
            raise ValueError(f"cannot lower batch size below {spec.batch_size}")
        return spec.with_batch_size(batch)
    if knob == "rho":
        rho = spec.rho * thresholds.rho_factor if spec.rho > 0 else thresholds.rho_start
        return spec.with_rho(rho)
    raise ValueError(f"unknown temperature knob {knob!r}; expected one of {KNOBS}")


def lower_temperature(spec: TrainSpec, knob: str, thresholds: Thresholds = Thresholds()) -> TrainSpec:
    """Inverse step of :func:`raise_temperature`."""
    if knob == "epochs":
        return spec.with_epochs(int(round(spec.epochs / thresholds.epoch_factor)))
    if knob == "batch_size":
        return spec.with_batch_size(int(round(spec.batch_size / thresholds.batch_factor)))
    if knob == "rho":
        rho = spec.rho / thresholds.rho_factor
        return spec.with_rho(rho if rho >= thresholds.rho_start else 0.0)
    raise ValueError(f"unknown temperature knob {knob!r}; expected one of {KNOBS}")


@dataclass
class ProbeOutcome:
    lmc: float
    cka: float
    test_error: float
    train_error: float = float("nan")


class Probe:
    """Real pipeline: dense training, then prune + alpha-epoch twin retraining + metrics.

    Twins are retrained at the dense run's final-phase learning rate.
    """

    def __init__(self, data: DataSplit, twin_seeds: Sequence[int] = (1, 2),
                 grid_points: int = DEFAULT_GRID, cka_samples: np.ndarray | None = None,
                 cka_seed: int = 0):
        self.data = data
        self.twin_seeds = tuple(twin_seeds)
        self.grid_points = grid_points
        self.cka_samples = (
            cka_sample_set(data.train, cka_seed) if cka_samples is None else cka_samples
        )

    def train_dense(self, init: ParamSet, spec: TrainSpec) -> tuple[ParamSet, TrainReport]:
        return train(init, None, spec, self.data, tag="dense")

    def measure(self, dense: ParamSet, dense_spec: TrainSpec, target: PruneSpec,
                alpha: int) -> ProbeOutcome:
        twin = TwinSpec.final_phase(dense_spec, alpha, self.twin_seeds)
        m = measure_pruned(dense, target, twin, self.data, self.cka_samples, self.grid_points)
        return ProbeOutcome(m.lmc.value, m.cka.value, m.test_error, m.train_error)


@dataclass
class TemperatureDecision:
    spec: TrainSpec
    regime_i: bool
    lmc: float
    knob: str

    @property
    def changed(self) -> bool:
        return self.regime_i


def tune_temperature(dense_init: ParamSet, t0: TrainSpec, target: PruneSpec,
                     thresholds: Thresholds, probe: Probe, knob: str = "epochs",
                     decrease_if_connected: bool = False) -> TemperatureDecision:
    """Train at ``t0``, prune to ``target``, and raise the temperature iff LMC < epsilon.

    With ``decrease_if_connected`` a well-connected model gets one step *down*
    in temperature instead of keeping ``t0``.
    """
    if knob not in KNOBS:
        raise ValueError(f"unknown temperature knob {knob!r}")
    dense, _ = probe.train_dense(dense_init, t0)
    outcome = probe.measure(dense, t0, target, thresholds.alpha)
    if outcome.lmc < thresholds.epsilon:
        return TemperatureDecision(raise_temperature(t0, knob, thresholds), True, outcome.lmc, knob)
    spec = lower_temperature(t0, knob, thresholds) if decrease_if_connected else t0
    return TemperatureDecision(spec, False, outcome.lmc, knob)


@dataclass(frozen=True)
class Candidate:
    params: Any
    spec: TrainSpec | None
    dense_test_error: float


@dataclass
class Selection:
    index: int
    conventional_index: int
    lmc: float
    fallback: bool
    probe_count: int
    scores: list[float] = field(default_factory=list)


def _first_argmin(values: Sequence[float]) -> int:
    return min(range(len(values)), key=lambda i: (values[i], i))


def _first_argmax(values: Sequence[float]) -> int:
    return min(range(len(values)), key=lambda i: (-values[i], i))


def _select(candidates: Sequence[Candidate], target: PruneSpec, thresholds: Thresholds,
            probe: Probe, score: str) -> Selection:
    if not candidates:
        raise ValueError("candidate set is empty")
    conventional = _first_argmin([c.dense_test_error for c in candidates])
    pick = candidates[conventional]
    first = probe.measure(pick.params, pick.spec, target, thresholds.alpha)
    if first.lmc >= thresholds.epsilon:
        return Selection(conventional, conventional, first.lmc, False, 0)
    outcomes = [probe.measure(c.params, c.spec, target, thresholds.alpha) for c in candidates]
    if score == "test_error":
        scores = [o.test_error for o in outcomes]
        index = _first_argmin(scores)
    else:
        scores = [o.cka for o in outcomes]
        index = _first_argmax(scores)
    return Selection(index, conventional, first.lmc, True, len(outcomes), scores)


def select_model_lmc_error(candidates: Sequence[Candidate], target: PruneSpec,
                           thresholds: Thresholds, probe: Probe) -> Selection:
    """Conventional pick (lowest dense test error) unless its pruned LMC < epsilon.

    In that case every candidate is pruned and retrained for alpha epochs and
    the lowest post-retrain test error wins (ties to the lowest index).
    """
    return _select(candidates, target, thresholds, probe, "test_error")


def select_model_lmc_cka(candidates: Sequence[Candidate], target: PruneSpec,
                         thresholds: Thresholds, probe: Probe) -> Selection:
    """Like :func:`select_model_lmc_error`, but the fallback maximises twin CKA."""
    return _select(candidates, target, thresholds, probe, "cka")


@dataclass
class RhoSelection:
    rho: float
    cka_by_rho: dict[float, float]
    failed: list[float]


def tune_sam_rho(dense_init: ParamSet, rho_grid: Sequence[float], base_spec: TrainSpec,
                 target: PruneSpec, probe: Probe,
                 thresholds: Thresholds = Thresholds()) -> RhoSelection:
    """Pick the SAM neighbourhood size whose pruned twins have the highest CKA."""
    if not rho_grid:
        raise ValueError("rho_grid is empty")
    if any(r < 0 for r in rho_grid):
        raise ValueError("rho values must be >= 0")
    ckas: dict[float, float] = {}
    failed = []
    for rho in rho_grid:
        spec = base_spec.with_rho(rho)
        try:
            dense, _ = probe.train_dense(dense_init, spec)
            ckas[rho] = probe.measure(dense, spec, target, thresholds.alpha).cka
        except (TrainingDiverged, DegenerateOutputError, FloatingPointError) as exc:
            log.warning("rho=%s failed: %s", rho, exc)
            failed.append(rho)
    if not ckas:
        raise NoViableRhoError(f"every rho in {list(rho_grid)} diverged")
    best = min(ckas, key=lambda r: (-ckas[r], r))
    return RhoSelection(best, ckas, failed)
