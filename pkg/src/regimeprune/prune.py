"""Unstructured magnitude pruning: UniformMP and GlobalMP masks."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import ParamSet, StructureError

UNIFORM = "uniform"
GLOBAL = "global"


class DegenerateLayerError(ValueError):
    pass


class DegenerateLayerWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PruneSpec:
    strategy: str = UNIFORM
    target_density: float = 0.05
    exclude_output_layer: bool = True

    def __post_init__(self):
        if self.strategy not in (UNIFORM, GLOBAL):
            raise ValueError(f"unknown pruning strategy {self.strategy!r}")
        if not 0.0 < self.target_density <= 1.0:
            raise ValueError(f"target_density must lie in (0, 1], got {self.target_density}")

    def with_density(self, density: float) -> "PruneSpec":
        return PruneSpec(self.strategy, density, self.exclude_output_layer)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "target_density": self.target_density,
            "exclude_output_layer": self.exclude_output_layer,
        }


class Mask:
    """Per-layer boolean keep-patterns for weight matrices.

    ``keep[i]`` is ``None`` for a layer that is exempt from pruning; biases are
    never pruned.
    """

    __slots__ = ("_keep",)

    def __init__(self, keep: Sequence[np.ndarray | None]):
        frozen = []
        for k in keep:
            if k is None:
                frozen.append(None)
                continue
            k = np.array(k, dtype=bool, copy=True)
            k.flags.writeable = False
            frozen.append(k)
        self._keep = tuple(frozen)

    def __reduce__(self):
        return (Mask, (self._keep,))

    @property
    def keep(self) -> tuple[np.ndarray | None, ...]:
        return self._keep

    def check_matches(self, params: ParamSet) -> None:
        if len(self._keep) != len(params.layers):
            raise StructureError(
                f"mask has {len(self._keep)} layers, params have {len(params.layers)}"
            )
        for k, layer in zip(self._keep, params.layers):
            if k is not None and k.shape != layer.weight.shape:
                raise StructureError(
                    f"mask layer {layer.index} shape {k.shape} != weight shape {layer.weight.shape}"
                )

    def kept_prunable(self) -> int:
        return sum(int(k.sum()) for k in self._keep if k is not None)

    def total_prunable(self) -> int:
        return sum(k.size for k in self._keep if k is not None)

    def prunable_density(self) -> float:
        total = self.total_prunable()
        return 1.0 if total == 0 else self.kept_prunable() / total

    def array_masks(self) -> list[np.ndarray | None]:
        """Masks aligned with ``ParamSet.arrays()`` (``None`` means keep all)."""
        out: list[np.ndarray | None] = []
        for k in self._keep:
            out.extend((k, None))
        return out

    def equals(self, other: "Mask") -> bool:
        if len(self._keep) != len(other._keep):
            return False
        for a, b in zip(self._keep, other._keep):
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or not np.array_equal(a, b)):
                return False
        return True

    @classmethod
    def all_keep(cls, params: ParamSet, exclude_output_layer: bool = True) -> "Mask":
        return cls(
            np.ones(l.weight.shape, dtype=bool) if inc else None
            for l, inc in zip(params.layers, _included(params, exclude_output_layer))
        )


def _included(params: ParamSet, exclude_output_layer: bool) -> list[bool]:
    last = len(params.layers) - 1
    return [
        l.prunable or (l.index == last and not exclude_output_layer) for l in params.layers
    ]


def kept_count(density: float, size: int) -> int:
    """Ceiling of ``density * size``, robust to binary round-off (0.07 * 100 -> 7)."""
    return min(size, math.ceil(round(density * size, 9)))


def _top_k(magnitudes: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -|w|: among equal magnitudes the lower flat index wins
    order = np.argsort(-magnitudes, kind="stable")
    keep = np.zeros(magnitudes.size, dtype=bool)
    keep[order[:k]] = True
    return keep


def uniform_mp(params: ParamSet, spec: PruneSpec) -> Mask:
    """Keep the top ``ceil(density * size)`` weights of every included layer."""
    keep: list[np.ndarray | None] = []
    for layer, inc in zip(params.layers, _included(params, spec.exclude_output_layer)):
        if not inc:
            keep.append(None)
            continue
        w = layer.weight
        k = kept_count(spec.target_density, w.size)
        if k == 0:
            raise DegenerateLayerError(
                f"layer {layer.index} would keep 0 of {w.size} weights at density {spec.target_density}"
            )
        keep.append(_top_k(np.abs(w).ravel(), k).reshape(w.shape))
    return Mask(keep)


def global_mp(params: ParamSet, spec: PruneSpec) -> Mask:
    """Keep the top ``ceil(density * total)`` weights across all included layers.

    Ties are broken by (layer index, flat index). A layer may lose every weight;
    that raises a :class:`DegenerateLayerWarning` rather than an error.
    """
    included = _included(params, spec.exclude_output_layer)
    layers = [l for l, inc in zip(params.layers, included) if inc]
    if not layers:
        return Mask([None] * len(params.layers))
    flat = np.concatenate([np.abs(l.weight).ravel() for l in layers])
    keep_flat = _top_k(flat, kept_count(spec.target_density, flat.size))
    keep: list[np.ndarray | None] = []
    offset = 0
    for layer, inc in zip(params.layers, included):
        if not inc:
            keep.append(None)
            continue
        size = layer.weight.size
        k = keep_flat[offset:offset + size].reshape(layer.weight.shape)
        offset += size
        if not k.any():
            warnings.warn(
                f"global_mp removed every weight of layer {layer.index}",
                DegenerateLayerWarning,
                stacklevel=2,
            )
        keep.append(k)
    return Mask(keep)


def make_mask(params: ParamSet, spec: PruneSpec) -> Mask:
    return uniform_mp(params, spec) if spec.strategy == UNIFORM else global_mp(params, spec)


def density(mask: Mask, params: ParamSet) -> float:
    """|M| / m: kept prunable weights plus every exempt parameter, over all parameters."""
    mask.check_matches(params)
    dropped = mask.total_prunable() - mask.kept_prunable()
    return (params.m - dropped) / params.m


def apply_mask(params: ParamSet, mask: Mask) -> ParamSet:
    """Zero the dropped weights (as +0.0); everything else is returned untouched."""
    mask.check_matches(params)
    arrays = []
    for layer, k in zip(params.layers, mask.keep):
        w = layer.weight if k is None else np.where(k, layer.weight, layer.weight.dtype.type(0))
        arrays.extend((w, layer.bias))
    return params.with_arrays(arrays)


def prune(params: ParamSet, spec: PruneSpec) -> tuple[ParamSet, Mask]:
    mask = make_mask(params, spec)
    return apply_mask(params, mask), mask
