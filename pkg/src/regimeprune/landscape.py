"""Linear mode connectivity, CKA output similarity, and twin retraining."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import DataSplit, Dataset
from .nn import ParamSet, _blend, classification_error, forward
from .optimize import SgdConfig, TrainReport, TrainSpec, TrainingDiverged, train
from .prune import Mask, PruneSpec, apply_mask, make_mask

DEFAULT_GRID = 11


class DegenerateOutputError(ValueError):
    """A model's outputs are constant over the sample set, so CKA is undefined."""


@dataclass(frozen=True)
class TwinSpec:
    """Recipe for retraining two copies of a pruned model under different SGD noise."""

    retrain_epochs: int = 2
    seeds: tuple[int, int] = (1, 2)
    template: TrainSpec = field(default_factory=lambda: TrainSpec.default(epochs=2))

    def __post_init__(self):
        if self.retrain_epochs < 1:
            raise ValueError("retrain_epochs must be >= 1")
        if len(self.seeds) != 2 or self.seeds[0] == self.seeds[1]:
            raise ValueError(f"twin seeds must be two distinct integers, got {self.seeds}")

    @classmethod
    def final_phase(cls, dense: TrainSpec, alpha: int, seeds=(1, 2)) -> "TwinSpec":
        """Constant LR at the dense run's last (post-decay) rate, for alpha epochs."""
        sgd = replace(dense.sgd, lr0=dense.final_lr(), lr_decay_epochs=())
        return cls(alpha, tuple(seeds), TrainSpec(alpha, dense.batch_size, sgd, None, 0))

    def spec_for(self, which: int) -> TrainSpec:
        # the template's epoch count is replaced by retrain_epochs; SAM is never used here
        return replace(self.template, epochs=self.retrain_epochs, sam=None, seed=self.seeds[which])

    def with_seeds(self, seeds) -> "TwinSpec":
        return replace(self, seeds=tuple(seeds))


@dataclass
class Twins:
    first: ParamSet
    second: ParamSet
    reports: tuple[TrainReport, TrainReport]

    def __iter__(self):
        yield self.first
        yield self.second


def retrain_twins(pruned: ParamSet, mask: Mask, spec: TwinSpec, data: DataSplit | Dataset) -> Twins:
    mask.check_matches(pruned)
    out, reports = [], []
    for which in (0, 1):
        try:
            params, report = train(pruned, mask, spec.spec_for(which), data, tag=f"twin {which}")
        except TrainingDiverged as exc:
            exc.tag = f"twin {which}"
            raise
        out.append(params)
        reports.append(report)
    return Twins(out[0], out[1], (reports[0], reports[1]))


@dataclass(frozen=True)
class LmcResult:
    value: float
    t_star: float
    grid_errors: tuple[tuple[float, float], ...]
    endpoint_errors: tuple[float, float]

    def recompute(self) -> float:
        errors = dict(self.grid_errors)
        return 0.5 * (self.endpoint_errors[0] + self.endpoint_errors[1]) - errors[self.t_star]


def lmc(a: ParamSet, b: ParamSet, data, grid_points: int = DEFAULT_GRID,
        error_fn: Callable[[ParamSet, object], float] = classification_error) -> LmcResult:
    """Training-error barrier along ``t*a + (1-t)*b`` on a uniform grid.

    Returns ``mean(err(a), err(b)) - err(gamma(t*))`` where ``t*`` maximises the
    absolute gap. Among tied gaps a negative (barrier) value is preferred, then
    the smallest t. A barrier gives a negative value.
    Grid point i uses weights ``(i/(n-1), (n-1-i)/(n-1))`` so swapping a and b
    reproduces the same interpolants bit for bit.
    """
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    a.check_same_structure(b)
    n = grid_points - 1
    errs = []
    for i in range(grid_points):
        errs.append(error_fn(_blend(a, b, i / n, (n - i) / n), data))
    e_b, e_a = errs[0], errs[-1]
    mid = 0.5 * (e_a + e_b)
    # max |gap|; among equal gaps the barrier (negative) reading wins, then the
    # smallest t. Preferring the sign keeps the value symmetric under a <-> b.
    i_star = min(range(grid_points), key=lambda i: (-abs(mid - errs[i]), mid - errs[i] >= 0, i))
    return LmcResult(
        value=mid - errs[i_star],
        t_star=i_star / n,
        grid_errors=tuple((i / n, e) for i, e in enumerate(errs)),
        endpoint_errors=(e_a, e_b),
    )


@dataclass(frozen=True)
class CkaResult:
    value: float
    sample_count: int
    sample_set_id: str


def _centered(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    return f - f.mean(axis=0, keepdims=True)


def cka_from_outputs(f: np.ndarray, g: np.ndarray) -> float:
    """Linear CKA of two output matrices sharing their rows.

    Uses the feature-space identity ``tr(K H L H) = ||Fc^T Gc||_F^2`` with
    column-centred outputs, which avoids building s-by-s Gram matrices.
    """
    f = np.asarray(f)
    g = np.asarray(g)
    if f.ndim != 2 or g.ndim != 2 or f.shape[0] != g.shape[0]:
        raise ValueError(f"output matrices must share their row count, got {f.shape} and {g.shape}")
    if f.shape[0] < 2:
        raise ValueError("CKA needs at least 2 samples")
    for name, x in (("first", f), ("second", g)):
        if np.ptp(x, axis=0).max() == 0:
            raise DegenerateOutputError(f"{name} model produces constant outputs on every sample")
    fc, gc = _centered(f), _centered(g)
    cross = np.sum((fc.T @ gc) ** 2)
    self_f = np.sum((fc.T @ fc) ** 2)
    self_g = np.sum((gc.T @ gc) ** 2)
    if self_f == 0 or self_g == 0:
        raise DegenerateOutputError("zero self-covariance")
    return float(cross / np.sqrt(self_f * self_g))


def sample_set_id(samples: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(samples).tobytes(), digest_size=6).hexdigest()


def cka(a: ParamSet, b: ParamSet, samples: np.ndarray) -> CkaResult:
    """CKA between the logits of two models on one shared sample set."""
    samples = np.asarray(samples)
    value = cka_from_outputs(forward(a, samples), forward(b, samples))
    return CkaResult(value, samples.shape[0], sample_set_id(samples))


@dataclass
class PrunedMeasurement:
    """Everything produced by prune -> twin retrain -> LMC/CKA on one dense model."""

    mask: Mask
    twins: Twins
    lmc: LmcResult
    cka: CkaResult

    @property
    def test_error(self) -> float:
        errs = [r.test_error for r in self.twins.reports]
        return float(np.mean(errs)) if None not in errs else float("nan")

    @property
    def train_error(self) -> float:
        return float(np.mean([r.train_error for r in self.twins.reports]))


def measure_pruned(dense: ParamSet, prune_spec: PruneSpec, twin_spec: TwinSpec,
                   data: DataSplit, cka_samples: np.ndarray,
                   grid_points: int = DEFAULT_GRID) -> PrunedMeasurement:
    """Prune ``dense``, retrain twins, and measure LMC on the train split and CKA."""
    mask = make_mask(dense, prune_spec)
    pruned = apply_mask(dense, mask)
    twins = retrain_twins(pruned, mask, twin_spec, data)
    return PrunedMeasurement(
        mask=mask,
        twins=twins,
        lmc=lmc(twins.first, twins.second, data.train, grid_points),
        cka=cka(twins.first, twins.second, cka_samples),
    )
