"""SGD with momentum and weight decay, a SAM wrapper, and the masked training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import BatchStream, DataSplit, Dataset
from .nn import ParamSet, classification_error, loss_and_grad_arrays
from .prune import Mask, apply_mask

GradFn = Callable[[Sequence[np.ndarray]], tuple[float, list[np.ndarray]]]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float, tag: str = ""):
        where = f"{tag}: " if tag else ""
        super().__init__(f"{where}non-finite loss {loss} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss
        self.tag = tag


@dataclass(frozen=True)
class SgdConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.lr_decay_factor <= 0:
            raise ValueError("weight_decay must be >= 0 and lr_decay_factor > 0")
        object.__setattr__(self, "lr_decay_epochs", tuple(sorted(int(e) for e in self.lr_decay_epochs)))

    @classmethod
    def proportional(cls, epochs: int, **kwargs) -> "SgdConfig":
        """Decay at 50% and 75% of the run, the 80/120-of-160 pattern rescaled."""
        return cls(lr_decay_epochs=_proportional_milestones(epochs), **kwargs)


def _proportional_milestones(epochs: int) -> tuple[int, ...]:
    return tuple(sorted({int(round(0.5 * epochs)), int(round(0.75 * epochs))} - {0}))


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 160
    batch_size: int = 64
    sgd: SgdConfig = field(default_factory=SgdConfig)
    sam: SamConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @classmethod
    def default(cls, epochs: int = 160, batch_size: int = 64, seed: int = 0,
                rho: float | None = None, **sgd_kwargs) -> "TrainSpec":
        return cls(
            epochs,
            batch_size,
            SgdConfig.proportional(epochs, **sgd_kwargs),
            None if rho is None else SamConfig(rho),
            seed,
        )

    @property
    def rho(self) -> float:
        return 0.0 if self.sam is None else self.sam.rho

    def with_epochs(self, epochs: int) -> "TrainSpec":
        """Change the epoch budget, moving LR milestones proportionally."""
        scale = epochs / self.epochs
        milestones = tuple(int(round(e * scale)) for e in self.sgd.lr_decay_epochs)
        return replace(self, epochs=epochs, sgd=replace(self.sgd, lr_decay_epochs=milestones))

    def with_batch_size(self, batch_size: int) -> "TrainSpec":
        return replace(self, batch_size=batch_size)

    def with_rho(self, rho: float | None) -> "TrainSpec":
        return replace(self, sam=None if rho is None else SamConfig(rho))

    def with_seed(self, seed: int) -> "TrainSpec":
        return replace(self, seed=seed)

    def final_lr(self) -> float:
        return lr_at(self.epochs - 1, self.sgd)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr0": self.sgd.lr0,
            "momentum": self.sgd.momentum,
            "weight_decay": self.sgd.weight_decay,
            "lr_decay_epochs": list(self.sgd.lr_decay_epochs),
            "lr_decay_factor": self.sgd.lr_decay_factor,
            "rho": None if self.sam is None else self.sam.rho,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        sgd = SgdConfig(d["lr0"], d["momentum"], d["weight_decay"],
                        tuple(d["lr_decay_epochs"]), d["lr_decay_factor"])
        sam = None if d.get("rho") is None else SamConfig(d["rho"])
        return cls(d["epochs"], d["batch_size"], sgd, sam, d["seed"])


@dataclass
class TrainReport:
    train_error: float
    test_error: float | None
    train_curve: list[float]
    test_curve: list[float]
    seconds: float
    steps: int


def lr_at(epoch: int, sgd: SgdConfig) -> float:
    """Piecewise-constant LR; a decay listed at epoch e applies from e onwards."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for e in sgd.lr_decay_epochs if epoch >= e)
    return sgd.lr0 * sgd.lr_decay_factor ** passed


def _drop_masks(mask: Mask | None, n_arrays: int) -> list[np.ndarray | None]:
    if mask is None:
        return [None] * n_arrays
    return [None if k is None else ~k for k in mask.array_masks()]


def _sgd_update(w, g, v, lr, momentum, weight_decay, drops) -> None:
    """In place: v <- momentum*v + (g + wd*w); w <- w - lr*v; dropped entries pinned to 0."""
    for wi, gi, vi, di in zip(w, g, v, drops):
        vi *= momentum
        vi += gi + weight_decay * wi
        if di is not None:
            np.putmask(vi, di, 0)
        wi -= lr * vi
        if di is not None:
            np.putmask(wi, di, 0)


def sgd_step(params: ParamSet, grads: ParamSet, velocity: Sequence[np.ndarray] | None,
             lr: float, momentum: float, weight_decay: float,
             mask: Mask | None = None) -> tuple[ParamSet, list[np.ndarray]]:
    params.check_same_structure(grads)
    w = params.mutable_arrays()
    v = [np.zeros_like(a) for a in w] if velocity is None else [np.array(a) for a in velocity]
    _sgd_update(w, grads.arrays(), v, lr, momentum, weight_decay, _drop_masks(mask, len(w)))
    return params.with_arrays(w), v


def sam_gradient(arrays: Sequence[np.ndarray], grad_fn: GradFn, rho: float,
                 drops: Sequence[np.ndarray | None] | None = None):
    """Gradient for one SAM step, evaluated at ``w + rho * g / ||g||``.

    Returns ``(loss at w, gradient at the perturbed point)``. The norm runs over
    unmasked coordinates only. With ``rho == 0`` or ``||g|| == 0`` the plain
    gradient is returned, so SAM reduces to SGD bit for bit.
    """
    loss, g = grad_fn(arrays)
    if rho == 0:
        return loss, g
    drops = drops if drops is not None else [None] * len(g)
    sq = 0.0
    for gi, di in zip(g, drops):
        gm = gi if di is None else np.where(di, 0, gi)
        sq += float(np.sum(gm.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm == 0.0:
        return loss, g
    scale = rho / norm
    perturbed = []
    for wi, gi, di in zip(arrays, g, drops):
        e = gi * wi.dtype.type(scale)
        if di is not None:
            e = np.where(di, 0, e)
        perturbed.append(wi + e)
    _, g_adv = grad_fn(perturbed)
    return loss, g_adv


def sam_step(params: ParamSet, batch: np.ndarray, labels: np.ndarray, rho: float,
             lr: float, momentum: float, weight_decay: float,
             velocity: Sequence[np.ndarray] | None = None,
             mask: Mask | None = None) -> tuple[ParamSet, list[np.ndarray]]:
    w = params.mutable_arrays()
    x = np.asarray(batch, dtype=params.dtype)
    y = np.asarray(labels, dtype=np.int64)
    drops = _drop_masks(mask, len(w))
    _, g = sam_gradient(w, lambda a: loss_and_grad_arrays(a, x, y), rho, drops)
    v = [np.zeros_like(a) for a in w] if velocity is None else [np.array(a) for a in velocity]
    _sgd_update(w, g, v, lr, momentum, weight_decay, drops)
    return params.with_arrays(w), v


EpochCallback = Callable[[int, Sequence[np.ndarray]], None]


def train(init: ParamSet, mask: Mask | None, spec: TrainSpec, data: DataSplit | Dataset,
          callback: EpochCallback | None = None, tag: str = "") -> tuple[ParamSet, TrainReport]:
    """Minibatch SGD (optionally SAM) from ``init`` under a fixed mask.

    ``spec.seed`` drives only the minibatch order. Masked weights are zeroed
    before the first step and kept at exactly zero throughout.
    ``callback(epoch, arrays)`` sees the live parameters at each epoch end.
    """
    train_set, test_set = (data.train, data.test) if isinstance(data, DataSplit) else (data, None)
    start = time.perf_counter()
    if mask is not None:
        init = apply_mask(init, mask)
    w = init.mutable_arrays()
    v = [np.zeros_like(a) for a in w]
    drops = _drop_masks(mask, len(w))
    stream = BatchStream(train_set, spec.batch_size, spec.seed)
    rho = spec.rho
    dtype = init.dtype
    train_curve, test_curve = [], []
    step = 0
    for epoch in range(spec.epochs):
        lr = lr_at(epoch, spec.sgd)
        for xb, yb in stream.batches():
            x = xb.astype(dtype, copy=False)
            loss, g = sam_gradient(w, lambda a: loss_and_grad_arrays(a, x, yb), rho, drops)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, step, loss, tag)
            _sgd_update(w, g, v, lr, spec.sgd.momentum, spec.sgd.weight_decay, drops)
            step += 1
        if not all(np.all(np.isfinite(a)) for a in w):
            raise TrainingDiverged(epoch, step, float("nan"), tag)
        current = init.with_arrays(w)
        train_curve.append(classification_error(current, train_set))
        if test_set is not None:
            test_curve.append(classification_error(current, test_set))
        if callback is not None:
            callback(epoch, w)
    result = init.with_arrays(w)
    report = TrainReport(
        train_error=train_curve[-1],
        test_error=test_curve[-1] if test_curve else None,
        train_curve=train_curve,
        test_curve=test_curve,
        seconds=time.perf_counter() - start,
        steps=step,
    )
    return result, report


def is_hotter(a: TrainSpec, b: TrainSpec) -> bool:
    """True if ``a`` runs at a strictly higher temperature than ``b`` on exactly one knob.

    Higher temperature means fewer epochs, a smaller batch, or a larger SAM rho.
    """
    moves = [
        a.epochs < b.epochs,
        a.batch_size < b.batch_size,
        a.rho > b.rho,
    ]
    same = [a.epochs == b.epochs, a.batch_size == b.batch_size, a.rho == b.rho]
    return sum(moves) == 1 and sum(same) == 2
