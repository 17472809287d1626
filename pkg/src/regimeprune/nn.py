"""Dense ReLU MLP with analytic gradients.

Parameters live in an immutable :class:`ParamSet`; every operation here is a
pure function of its inputs. Weight matrices are stored ``(out, in)`` so a
layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

EVAL_CHUNK = 8192


class StructureError(ValueError):
    """Two parameter sets (or a set and an input) do not line up."""


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    output_dim: int
    depth: int = 2
    width_scale: float = 1.0
    base_width: int = 256
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1 or self.width_scale <= 0:
            raise ValueError("base_width and width_scale must be positive")
        if self.hidden_width < 1:
            raise ValueError(
                f"hidden width round({self.base_width} * {self.width_scale}) is < 1"
            )
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def hidden_width(self) -> int:
        return int(round(self.base_width * self.width_scale))

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for every layer, input to output."""
        widths = [self.input_dim] + [self.hidden_width] * self.depth + [self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "depth": self.depth,
            "width_scale": self.width_scale,
            "base_width": self.base_width,
            "activation": self.activation,
        }


@dataclass(frozen=True)
class Layer:
    index: int
    weight: np.ndarray
    bias: np.ndarray
    prunable: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.flags.writeable = False
    return out


class ParamSet:
    """Ordered, immutable collection of (weight, bias) layers.

    Arrays are copied and marked read-only on construction, so a ParamSet can
    be shared freely between workers.
    """

    __slots__ = ("_layers", "_m")

    def __init__(self, layers: Iterable[Layer]):
        built = []
        for i, layer in enumerate(layers):
            w = np.asarray(layer.weight)
            b = np.asarray(layer.bias)
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise StructureError(
                    f"layer {i}: weight {w.shape} and bias {b.shape} are inconsistent"
                )
            if built and built[-1].weight.shape[0] != w.shape[1]:
                raise StructureError(
                    f"layer {i}: fan_in {w.shape[1]} != previous fan_out "
                    f"{built[-1].weight.shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise FloatingPointError(f"layer {i} contains non-finite values")
            built.append(Layer(i, _frozen(w), _frozen(b.astype(w.dtype, copy=False)), bool(layer.prunable)))
        if not built:
            raise StructureError("a ParamSet needs at least one layer")
        if len({l.weight.dtype for l in built}) != 1:
            raise StructureError("all layers must share one dtype")
        self._layers = tuple(built)
        self._m = sum(l.weight.size + l.bias.size for l in built)

    @classmethod
    def from_arrays(
        cls, arrays: Sequence[np.ndarray], prunable: Sequence[bool]
    ) -> "ParamSet":
        """Build from the flat ``[W0, b0, W1, b1, ...]`` list."""
        if len(arrays) != 2 * len(prunable):
            raise StructureError("need one (weight, bias) pair per prunable flag")
        return cls(
            Layer(i, arrays[2 * i], arrays[2 * i + 1], p) for i, p in enumerate(prunable)
        )

    @property
    def layers(self) -> tuple[Layer, ...]:
        return self._layers

    @property
    def m(self) -> int:
        return self._m

    @property
    def dtype(self) -> np.dtype:
        return self._layers[0].weight.dtype

    @property
    def input_dim(self) -> int:
        return self._layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self._layers[-1].weight.shape[0]

    @property
    def prunable_flags(self) -> tuple[bool, ...]:
        return tuple(l.prunable for l in self._layers)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for l in self._layers:
            out.extend((l.weight, l.bias))
        return out

    def mutable_arrays(self) -> list[np.ndarray]:
        return [a.copy() for a in self.arrays()]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ParamSet":
        return ParamSet.from_arrays(arrays, self.prunable_flags)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def structure(self) -> tuple:
        return tuple((l.weight.shape, l.prunable) for l in self._layers)

    def check_same_structure(self, other: "ParamSet") -> None:
        if self.structure() != other.structure():
            raise StructureError(
                f"parameter sets differ in structure: {self.structure()} vs {other.structure()}"
            )
        if self.dtype != other.dtype:
            raise StructureError(f"dtype mismatch: {self.dtype} vs {other.dtype}")

    def astype(self, dtype) -> "ParamSet":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality (same structure, dtype and bytes)."""
        if self.structure() != other.structure() or self.dtype != other.dtype:
            return False
        return all(
            a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays())
        )

    def __reduce__(self):
        return (ParamSet, (self._layers,))

    def __repr__(self) -> str:
        shapes = ", ".join(f"{l.weight.shape[1]}->{l.weight.shape[0]}" for l in self._layers)
        return f"ParamSet([{shapes}], m={self._m}, dtype={self.dtype})"


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases.

    The output layer is flagged non-prunable.
    """
    rng = np.random.default_rng(seed)
    dims = config.layer_dims()
    layers = []
    for i, (fan_in, fan_out) in enumerate(dims):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
        layers.append(Layer(i, w, b, prunable=i < len(dims) - 1))
    return ParamSet(layers)


def param_count(params: ParamSet) -> int:
    return params.m


def _check_batch(params: ParamSet, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise StructureError(
            f"batch shape {x.shape} does not match input_dim {params.input_dim}"
        )
    return x.astype(params.dtype, copy=False)


def _forward_arrays(arrays: Sequence[np.ndarray], x: np.ndarray, keep: bool = False):
    """Run the MLP on raw ``[W0, b0, ...]``; optionally keep activations for backprop."""
    n_layers = len(arrays) // 2
    acts = [x]
    h = x
    for i in range(n_layers):
        z = h @ arrays[2 * i].T + arrays[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(z, 0)
            if keep:
                acts.append(h)
        else:
            h = z
    return (h, acts) if keep else h


def forward(params: ParamSet, batch: np.ndarray) -> np.ndarray:
    """Logits of shape ``(s, d_out)``."""
    x = _check_batch(params, batch)
    return _forward_arrays(params.arrays(), x)


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    loss = -log_probs[np.arange(n), labels].mean()
    probs = exp / denom
    probs[np.arange(n), labels] -= 1
    return float(loss), probs / n


def loss_and_grad_arrays(arrays: Sequence[np.ndarray], x: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. ``[W0, b0, ...]``."""
    n_layers = len(arrays) // 2
    logits, acts = _forward_arrays(arrays, x, keep=True)
    loss, dz = _softmax_xent(logits, labels)
    dz = dz.astype(logits.dtype, copy=False)
    grads: list[np.ndarray] = [None] * len(arrays)  # type: ignore[list-item]
    for i in reversed(range(n_layers)):
        a_prev = acts[i]
        grads[2 * i] = dz.T @ a_prev
        grads[2 * i + 1] = dz.sum(axis=0)
        if i > 0:
            dz = (dz @ arrays[2 * i]) * (a_prev > 0)
    return loss, grads


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise StructureError(f"labels shape {y.shape} does not match batch size {n}")
    if n and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64, copy=False)


def loss_and_grad(params: ParamSet, batch: np.ndarray, labels) -> tuple[float, ParamSet]:
    x = _check_batch(params, batch)
    if x.shape[0] == 0:
        raise ValueError("loss_and_grad needs a non-empty batch")
    y = _check_labels(labels, x.shape[0], params.output_dim)
    loss, grads = loss_and_grad_arrays(params.arrays(), x, y)
    return loss, params.with_arrays(grads)


def predict(params: ParamSet, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    x = _check_batch(params, features)
    arrays = params.arrays()
    out = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], EVAL_CHUNK):
        out[start:start + EVAL_CHUNK] = np.argmax(
            _forward_arrays(arrays, x[start:start + EVAL_CHUNK]), axis=1
        )
    return out


def classification_error(params: ParamSet, data) -> float:
    """Fraction of misclassified samples in ``data`` (anything with features/labels)."""
    features, labels = data.features, data.labels
    if len(labels) == 0:
        raise ValueError("classification_error needs a non-empty split")
    y = _check_labels(labels, len(features), params.output_dim)
    return float(np.mean(predict(params, features) != y))


def _blend(a: ParamSet, b: ParamSet, wa: float, wb: float) -> ParamSet:
    a.check_same_structure(b)
    if wb == 0.0 and wa == 1.0:
        return a
    if wa == 0.0 and wb == 1.0:
        return b
    dt = a.dtype.type
    return a.with_arrays(
        [dt(wa) * x + dt(wb) * y for x, y in zip(a.arrays(), b.arrays())]
    )


def interpolate(a: ParamSet, b: ParamSet, t: float) -> ParamSet:
    """``t * a + (1 - t) * b``; t = 1 gives ``a`` and t = 0 gives ``b`` exactly."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return _blend(a, b, t, 1.0 - t)

