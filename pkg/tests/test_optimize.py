import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_net
from regimeprune.nn import Layer, ParamSet, loss_and_grad
from regimeprune.optimize import (
    SamConfig,
    SgdConfig,
    TrainingDiverged,
    TrainSpec,
    is_hotter,
    lr_at,
    sam_gradient,
    sam_step,
    sgd_step,
    train,
)
from regimeprune.prune import PruneSpec, make_mask


def _single(w):
    return ParamSet([Layer(0, np.array([[w]], dtype=np.float64), np.zeros(1), True)])


def _quadratic(arrays):
    # L(w) = sum of squares, so dL/dw = 2w
    return float(sum(np.sum(a ** 2) for a in arrays)), [2 * a for a in arrays]


# -- schedule -----------------------------------------------------------------

@pytest.mark.parametrize("epoch,expected", [(0, 0.1), (10, 0.1), (79, 0.1), (80, 0.01),
                                            (119, 0.01), (120, 0.001), (130, 0.001)])
def test_lr_schedule(epoch, expected):
    sgd = SgdConfig(lr0=0.1, lr_decay_epochs=(80, 120))
    assert lr_at(epoch, sgd) == pytest.approx(expected, rel=1e-12)


def test_proportional_schedule_matches_160_epoch_pattern():
    assert SgdConfig.proportional(160).lr_decay_epochs == (80, 120)
    assert SgdConfig.proportional(40).lr_decay_epochs == (20, 30)


def test_with_epochs_rescales_milestones():
    spec = TrainSpec.default(epochs=80)
    assert spec.with_epochs(40).sgd.lr_decay_epochs == (20, 30)
    assert spec.with_epochs(40).epochs == 40


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 1.0), st.lists(st.integers(0, 200), max_size=4),
       st.floats(0.01, 0.9), st.integers(0, 300))
def test_lr_always_positive(lr0, decays, factor, epoch):
    sgd = SgdConfig(lr0=lr0, lr_decay_epochs=tuple(decays), lr_decay_factor=factor)
    passed = sum(epoch >= d for d in decays)
    assert lr_at(epoch, sgd) == pytest.approx(lr0 * factor ** passed)
    assert lr_at(epoch, sgd) > 0


def test_train_spec_round_trips_through_dict():
    spec = TrainSpec.default(epochs=12, batch_size=16, seed=5, rho=0.2, lr0=0.05)
    assert TrainSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("kwargs", [dict(momentum=1.0), dict(lr0=-1.0), dict(weight_decay=-1.0)])
def test_sgd_config_validation(kwargs):
    with pytest.raises(ValueError):
        SgdConfig(**kwargs)


def test_sam_config_validation():
    with pytest.raises(ValueError):
        SamConfig(-0.1)


# -- sgd_step -----------------------------------------------------------------

def test_sgd_vanilla_step():
    p, g = _single(2.0), _single(0.5)
    out, _ = sgd_step(p, g, None, lr=1.0, momentum=0.0, weight_decay=0.0)
    assert out.layers[0].weight[0, 0] == 1.5


def test_sgd_decay_only():
    p = _single(2.0)
    out, _ = sgd_step(p, _single(0.0), None, lr=0.1, momentum=0.0, weight_decay=0.01)
    assert out.layers[0].weight[0, 0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), rel=1e-15)


def test_sgd_momentum_accumulates():
    p, g = _single(0.0), _single(1.0)
    p, v = sgd_step(p, g, None, 1.0, 0.9, 0.0)
    p, v = sgd_step(p, g, v, 1.0, 0.9, 0.0)
    assert v[0][0, 0] == pytest.approx(1.9)
    assert p.layers[0].weight[0, 0] == pytest.approx(-2.9)


def test_sgd_masked_coordinate_stays_zero():
    p = make_net((4, 6, 2), seed=0)
    mask = make_mask(p, PruneSpec("uniform", 0.25))
    g = make_net((4, 6, 2), seed=1)
    out, v = sgd_step(p, g, None, 0.5, 0.9, 1e-4, mask)
    dropped = ~mask.keep[0]
    assert np.all(out.layers[0].weight[dropped] == 0)
    assert np.all(v[0][dropped] == 0)


# -- SAM ------------------------------------------------------------------------

def test_sam_quadratic_hand_example():
    w = [np.array([1.0])]
    seen = []

    def grad_fn(arrays):
        seen.append(float(arrays[0][0]))
        return _quadratic(arrays)

    loss, g = sam_gradient(w, grad_fn, rho=0.5)
    assert seen == [1.0, 1.5]
    assert loss == 1.0
    assert g[0][0] == 3.0
    assert w[0][0] == 1.0  # no residue left in the caller's arrays


def test_sam_zero_gradient_skips_perturbation():
    w = [np.array([0.0, 0.0])]
    calls = []

    def grad_fn(arrays):
        calls.append(1)
        return _quadratic(arrays)

    _, g = sam_gradient(w, grad_fn, rho=0.3)
    assert len(calls) == 1
    np.testing.assert_array_equal(g[0], [0.0, 0.0])


def test_sam_norm_ignores_masked_coordinates():
    w = [np.array([1.0, 10.0])]
    drops = [np.array([False, True])]
    # masked coordinate excluded: norm = 2, perturbation only on coordinate 0
    _, g = sam_gradient(w, _quadratic, rho=1.0, drops=drops)
    np.testing.assert_allclose(g[0], [4.0, 20.0])


def test_sam_step_rho_zero_equals_sgd_step():
    rng = np.random.default_rng(0)
    p = make_net((3, 5, 2), seed=2, dtype=np.float32)
    x = rng.standard_normal((8, 3)).astype(np.float32)
    y = rng.integers(0, 2, 8)
    _, g = loss_and_grad(p, x, y)
    a, va = sgd_step(p, g, None, 0.1, 0.9, 1e-4)
    b, vb = sam_step(p, x, y, 0.0, 0.1, 0.9, 1e-4)
    assert a.equals(b)
    assert all(np.array_equal(u, w) for u, w in zip(va, vb))


def test_sam_step_at_stationary_point_only_decays():
    p = ParamSet([Layer(0, np.zeros((2, 2)), np.zeros(2), False)])
    x = np.ones((2, 2))
    y = np.array([0, 1])  # symmetric labels: zero gradient at zero weights
    out, _ = sam_step(p, x, y, 0.5, 0.1, 0.0, 0.0)
    assert out.equals(p)


# -- train ------------------------------------------------------------------------

def test_train_zero_lr_returns_masked_init(small_spirals, small_init):
    mask = make_mask(small_init, PruneSpec("uniform", 0.3))
    spec = TrainSpec(1, len(small_spirals.train), SgdConfig(lr0=0.0))
    out, report = train(small_init, mask, spec, small_spirals)
    from regimeprune.prune import apply_mask
    assert out.equals(apply_mask(small_init, mask))
    assert report.steps == 1


def test_train_is_deterministic(small_spirals, small_init):
    spec = TrainSpec.default(epochs=3, batch_size=32, seed=4)
    a, ra = train(small_init, None, spec, small_spirals)
    b, rb = train(small_init, None, spec, small_spirals)
    assert a.equals(b)
    assert ra.train_curve == rb.train_curve
    c, _ = train(small_init, None, spec.with_seed(5), small_spirals)
    assert not a.equals(c)


def test_train_report_curves(small_spirals, small_init):
    _, report = train(small_init, None, TrainSpec.default(epochs=4, batch_size=50), small_spirals)
    assert len(report.train_curve) == len(report.test_curve) == 4
    assert report.train_error == report.train_curve[-1]
    assert report.steps == 4 * -(-len(small_spirals.train) // 50)


def test_train_mask_persists_every_epoch(small_spirals, small_init):
    mask = make_mask(small_init, PruneSpec("global", 0.2))
    drops = [None if k is None else ~k for k in mask.array_masks()]
    worst = []

    def check(epoch, arrays):
        worst.append(max(float(np.abs(a[d]).max(initial=0.0)) for a, d in zip(arrays, drops) if d is not None))

    out, _ = train(small_init, mask, TrainSpec.default(epochs=5, batch_size=32, rho=0.1), small_spirals, check)
    assert worst == [0.0] * 5
    assert out.layers[0].weight[drops[0]].max(initial=0.0) == 0.0


def test_train_sam_rho_zero_matches_sgd(small_spirals, small_init):
    base = TrainSpec.default(epochs=5, batch_size=32, seed=1)
    a, _ = train(small_init, None, base, small_spirals)
    b, _ = train(small_init, None, base.with_rho(0.0), small_spirals)
    assert a.equals(b)


def test_train_divergence_raises(small_spirals, small_init):
    spec = TrainSpec(3, 16, SgdConfig(lr0=1e30, momentum=0.0, weight_decay=0.0))
    with pytest.raises(TrainingDiverged) as info:
        with np.errstate(all="ignore"):
            train(small_init, None, spec, small_spirals, tag="dense")
    assert info.value.epoch == 0
    assert "dense" in str(info.value)


# -- temperature ordering ---------------------------------------------------

@pytest.mark.parametrize("a,b,expected", [
    (TrainSpec(epochs=40), TrainSpec(epochs=80), True),
    (TrainSpec(epochs=80), TrainSpec(epochs=40), False),
    (TrainSpec(batch_size=32), TrainSpec(batch_size=64), True),
    (TrainSpec().with_rho(0.2), TrainSpec().with_rho(0.1), True),
    (TrainSpec().with_rho(0.1), TrainSpec(), True),
    (TrainSpec(epochs=40, batch_size=32), TrainSpec(), False),
    (TrainSpec(), TrainSpec(), False),
])
def test_is_hotter(a, b, expected):
    assert is_hotter(a, b) is expected
