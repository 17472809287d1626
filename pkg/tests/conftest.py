"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's own code paths: CKA is
evaluated with explicit centering matrices and traces, forward passes with
plain matmuls, and gradients with central differences.
"""

from __future__ import annotations

from types import SimpleNamespace

import math

import numpy as np
import pytest

from regimeprune.data import gen_spirals, split_dataset
from regimeprune.nn import Layer, ModelConfig, ParamSet, init_params, loss_and_grad_arrays
from regimeprune.optimize import TrainingDiverged
from regimeprune.regimes import ProbeOutcome


def make_net(sizes, seed=0, dtype=np.float64, scale=1.0, prunable=None):
    """Random ParamSet with the given layer sizes, e.g. (2, 3, 2)."""
    rng = np.random.default_rng(seed)
    n = len(sizes) - 1
    flags = prunable if prunable is not None else [i < n - 1 for i in range(n)]
    layers = []
    for i in range(n):
        w = (scale * rng.standard_normal((sizes[i + 1], sizes[i]))).astype(dtype)
        b = (scale * rng.standard_normal(sizes[i + 1])).astype(dtype)
        layers.append(Layer(i, w, b, flags[i]))
    return ParamSet(layers)


def oracle_forward(params, x):
    h = np.asarray(x, dtype=np.float64)
    arrays = [np.asarray(a, dtype=np.float64) for a in params.arrays()]
    n = len(arrays) // 2
    for i in range(n):
        w, b = arrays[2 * i], arrays[2 * i + 1]
        z = np.array([[sum(w[r, c] * row[c] for c in range(w.shape[1])) + b[r]
                       for r in range(w.shape[0])] for row in h])
        h = np.maximum(z, 0.0) if i < n - 1 else z
    return h


def oracle_cka(f, g):
    """Direct trace formula with an explicit H_s; the (s-1)^-2 factors cancel."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    s = f.shape[0]
    h = np.eye(s) - np.ones((s, s)) / s
    k, l = f @ f.T, g @ g.T

    def cov(a, b):
        return np.trace(a @ h @ b @ h) / (s - 1) ** 2

    return cov(k, l) / np.sqrt(cov(k, k) * cov(l, l))


def oracle_global(params, d):
    """Sort every included weight by (-|w|, layer, flat index) and keep the head."""
    entries = []
    for layer in params.layers:
        if layer.prunable:
            for j, w in enumerate(np.abs(layer.weight).ravel()):
                entries.append((-w, layer.index, j))
    k = math.ceil(round(d * len(entries), 9))
    kept = {(li, j) for _, li, j in sorted(entries)[:k]}
    return [
        np.array([(l.index, j) in kept for j in range(l.weight.size)]).reshape(l.weight.shape)
        if l.prunable else None
        for l in params.layers
    ]


def fd_gradient(arrays, x, labels, h=1e-4):
    """Central differences in float64 for every coordinate of every array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    x = np.asarray(x, dtype=np.float64)
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            lp, _ = loss_and_grad_arrays(arrays, x, labels)
            a[idx] = old - h
            lm, _ = loss_and_grad_arrays(arrays, x, labels)
            a[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@pytest.fixture(scope="session")
def small_spirals():
    return split_dataset(gen_spirals(2, 150, 0.1, 1.0, seed=5), seed=0)


@pytest.fixture(scope="session")
def small_config(small_spirals):
    return ModelConfig(small_spirals.dim, small_spirals.num_classes, depth=2, base_width=16)


@pytest.fixture
def small_init(small_config):
    return init_params(small_config, seed=0)


class FakeProbe:
    """Scripted stand-in for :class:`regimeprune.regimes.Probe`.

    ``train_dense`` hands back the call index as the "dense model", so
    ``measure`` can look up the scripted outcome for that candidate.
    ``rho_cka`` maps a SAM rho to the CKA its pruned twins should report.
    """

    def __init__(self, outcomes=(), dense_errors=(), rho_cka=None, diverge_rhos=()):
        self.outcomes = list(outcomes)
        self.dense_errors = list(dense_errors)
        self.rho_cka = rho_cka
        self.diverge_rhos = set(diverge_rhos)
        self.trained = []
        self.measured = []

    def train_dense(self, init, spec):
        index = len(self.trained)
        self.trained.append(spec)
        if spec.rho in self.diverge_rhos:
            raise TrainingDiverged(0, 0, float("nan"), f"rho={spec.rho}")
        error = self.dense_errors[index] if index < len(self.dense_errors) else 0.0
        return index, SimpleNamespace(test_error=error, train_error=error)

    def measure(self, dense, dense_spec, target, alpha):
        self.measured.append(dense)
        if self.rho_cka is not None:
            return ProbeOutcome(0.0, self.rho_cka[dense_spec.rho], 0.0)
        return self.outcomes[dense]

    @property
    def probe_runs(self):
        """Measurements beyond the first (conventional) one."""
        return max(0, len(self.measured) - 1)


def outcome(lmc=0.0, cka=0.5, test_error=0.1):
    return ProbeOutcome(lmc, cka, test_error)
