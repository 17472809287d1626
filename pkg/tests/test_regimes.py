import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FakeProbe, outcome
from regimeprune.optimize import TrainSpec, is_hotter
from regimeprune.prune import PruneSpec
from regimeprune.regimes import (
    REGIME_I,
    REGIME_II,
    REGIME_II_A,
    REGIME_II_B,
    Candidate,
    NoViableRhoError,
    Probe,
    SuspiciousInputError,
    Thresholds,
    classify_regime,
    lower_temperature,
    raise_temperature,
    select_model_lmc_cka,
    select_model_lmc_error,
    tune_sam_rho,
    tune_temperature,
)

TARGET = PruneSpec("uniform", 0.1)
T0 = TrainSpec.default(epochs=80, batch_size=64)
DENSE_ERRORS = [0.10, 0.12, 0.15]


def candidates(errors=DENSE_ERRORS):
    return [Candidate(i, T0, e) for i, e in enumerate(errors)]


# -- classify_regime ----------------------------------------------------------------

@pytest.mark.parametrize("lmc,cka,ref,expected", [
    (-0.4, 0.2, None, REGIME_I),
    (-0.4, 0.99, 0.5, REGIME_I),
    (-0.01, 0.9, 0.7, REGIME_II_B),
    (-0.01, 0.6, 0.7, REGIME_II_A),
    (-0.01, 0.7, 0.7, REGIME_II_B),
    (0.0, 0.3, None, REGIME_II),
    (-0.05, 0.3, None, REGIME_II),  # boundary: lmc == epsilon is not Regime I
    (0.01, 0.5, 0.4, REGIME_II_B),
])
def test_classify_regime(lmc, cka, ref, expected):
    label = classify_regime(lmc, cka, Thresholds(), ref)
    assert label.label == expected
    assert label.sublabel_determined == (expected != REGIME_II)


def test_classify_regime_rejects_positive_lmc():
    with pytest.raises(SuspiciousInputError):
        classify_regime(0.02, 0.5)


@settings(max_examples=200)
@given(st.floats(-1.0, 0.01), st.floats(0.0, 1.0), st.one_of(st.none(), st.floats(0.0, 1.0)))
def test_regime_labels_partition(lmc, cka, ref):
    label = classify_regime(lmc, cka, Thresholds(), ref).label
    assert (label == REGIME_I) == (lmc < -0.05)
    if ref is None:
        assert label in (REGIME_I, REGIME_II)
    else:
        assert label in (REGIME_I, REGIME_II_A, REGIME_II_B)


@pytest.mark.parametrize("kwargs", [dict(epsilon=0.0), dict(alpha=0), dict(epoch_factor=1.0)])
def test_thresholds_validation(kwargs):
    with pytest.raises(ValueError):
        Thresholds(**kwargs)


# -- temperature steps ----------------------------------------------------------------

@pytest.mark.parametrize("knob,check", [
    ("epochs", lambda s: s.epochs == 40),
    ("batch_size", lambda s: s.batch_size == 32),
    ("rho", lambda s: s.rho == 0.1),
])
def test_raise_temperature_moves_one_knob(knob, check):
    hot = raise_temperature(T0, knob)
    assert check(hot)
    assert is_hotter(hot, T0)


def test_raise_rho_doubles():
    assert raise_temperature(T0.with_rho(0.2), "rho").rho == pytest.approx(0.4)


def test_lower_temperature_inverts_raise():
    for knob in ("epochs", "batch_size", "rho"):
        start = T0.with_rho(0.2)
        assert lower_temperature(raise_temperature(start, knob), knob) == start


def test_raise_temperature_floor():
    with pytest.raises(ValueError):
        raise_temperature(TrainSpec(epochs=1), "epochs")


# -- temperature tuning ----------------------------------------------------------------------

def test_tune_temperature_regime_i_raises():
    probe = FakeProbe([outcome(lmc=-0.3)])
    decision = tune_temperature(None, T0, TARGET, Thresholds(), probe)
    assert decision.regime_i and decision.changed
    assert decision.spec.epochs == 40
    assert decision.spec.sgd.lr_decay_epochs == (20, 30)
    assert probe.trained == [T0]


def test_tune_temperature_connected_keeps_t0():
    decision = tune_temperature(None, T0, TARGET, Thresholds(), FakeProbe([outcome(lmc=-0.01)]))
    assert not decision.regime_i
    assert decision.spec == T0


def test_tune_temperature_boundary_is_strict():
    decision = tune_temperature(None, T0, TARGET, Thresholds(), FakeProbe([outcome(lmc=-0.05)]))
    assert decision.spec == T0


def test_tune_temperature_optional_decrease():
    decision = tune_temperature(None, T0, TARGET, Thresholds(), FakeProbe([outcome(lmc=0.0)]),
                                decrease_if_connected=True)
    assert decision.spec.epochs == 160


@pytest.mark.parametrize("knob", ["epochs", "batch_size", "rho"])
@settings(max_examples=40)
@given(lmc=st.floats(-1.0, 0.0))
def test_tune_temperature_branch_correctness(knob, lmc):
    decision = tune_temperature(None, T0, TARGET, Thresholds(), FakeProbe([outcome(lmc=lmc)]), knob)
    assert (decision.spec != T0) == (lmc < -0.05)
    if decision.spec != T0:
        assert is_hotter(decision.spec, T0)


# -- model selection ----------------------------------------------------------------

def test_select_early_exit():
    probe = FakeProbe([outcome(lmc=-0.01, test_error=0.4), outcome(), outcome()])
    sel = select_model_lmc_error(candidates(), TARGET, Thresholds(), probe)
    assert (sel.index, sel.probe_count, sel.fallback) == (0, 0, False)
    assert probe.measured == [0]


def test_select_fallback_argmin_test_error():
    probe = FakeProbe([outcome(-0.3, 0.5, 0.40), outcome(-0.2, 0.9, 0.25), outcome(-0.1, 0.7, 0.30)])
    sel = select_model_lmc_error(candidates(), TARGET, Thresholds(), probe)
    assert (sel.index, sel.probe_count, sel.fallback) == (1, 3, True)
    assert sel.scores == [0.40, 0.25, 0.30]


def test_select_single_candidate():
    for lmc in (-0.9, 0.0):
        probe = FakeProbe([outcome(lmc=lmc)])
        assert select_model_lmc_error(candidates([0.2]), TARGET, Thresholds(), probe).index == 0


def test_select_conventional_pick_is_lowest_dense_error():
    probe = FakeProbe([outcome(), outcome(), outcome(lmc=0.0)])
    sel = select_model_lmc_error(candidates([0.3, 0.2, 0.1]), TARGET, Thresholds(), probe)
    assert sel.conventional_index == 2 and sel.index == 2
    assert probe.measured == [2]


def test_select_argmin_ties_to_lowest_index():
    probe = FakeProbe([outcome(-0.3, test_error=0.3), outcome(test_error=0.2), outcome(test_error=0.2)])
    assert select_model_lmc_error(candidates(), TARGET, Thresholds(), probe).index == 1


def test_select_dense_error_ties_to_lowest_index():
    probe = FakeProbe([outcome(lmc=0.0), outcome(lmc=0.0)])
    assert select_model_lmc_error(candidates([0.1, 0.1]), TARGET, Thresholds(), probe).conventional_index == 0


def test_select_cka_fallback_argmax():
    probe = FakeProbe([outcome(-0.3, 0.5, 0.1), outcome(-0.2, 0.9, 0.5), outcome(-0.1, 0.7, 0.2)])
    sel = select_model_lmc_cka(candidates(), TARGET, Thresholds(), probe)
    assert (sel.index, sel.probe_count) == (1, 3)


def test_select_cka_ties_to_lowest_index():
    probe = FakeProbe([outcome(-0.3, 0.8), outcome(-0.2, 0.8), outcome(-0.1, 0.8)])
    assert select_model_lmc_cka(candidates(), TARGET, Thresholds(), probe).index == 0


@settings(max_examples=60)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=5), st.floats(-0.05, 0.0),
       st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5))
def test_algorithms_agree_on_early_exit(errors, lmc, ckas):
    def probe():
        return FakeProbe([outcome(lmc, c, e) for c, e in zip(ckas, ckas[::-1])])

    a = select_model_lmc_error(candidates(errors), TARGET, Thresholds(), probe())
    b = select_model_lmc_cka(candidates(errors), TARGET, Thresholds(), probe())
    assert a.index == b.index == int(np.argmin(errors))
    assert a.probe_count == b.probe_count == 0


def test_select_empty_set():
    with pytest.raises(ValueError):
        select_model_lmc_error([], TARGET, Thresholds(), FakeProbe())


# -- SAM rho tuning ----------------------------------------------------------------

def test_tune_rho_picks_highest_cka():
    probe = FakeProbe(rho_cka={0.0: 0.6, 0.1: 0.7, 0.8: 0.9})
    result = tune_sam_rho(None, [0.0, 0.1, 0.8], T0, TARGET, probe)
    assert result.rho == 0.8
    assert [s.rho for s in probe.trained] == [0.0, 0.1, 0.8]


def test_tune_rho_single_and_ties():
    assert tune_sam_rho(None, [0.3], T0, TARGET, FakeProbe(rho_cka={0.3: 0.1})).rho == 0.3
    tie = FakeProbe(rho_cka={0.5: 0.7, 0.2: 0.7, 0.8: 0.6})
    assert tune_sam_rho(None, [0.5, 0.2, 0.8], T0, TARGET, tie).rho == 0.2


def test_tune_rho_skips_diverged_runs():
    probe = FakeProbe(rho_cka={0.0: 0.6, 0.8: 0.9}, diverge_rhos={0.8})
    result = tune_sam_rho(None, [0.0, 0.8], T0, TARGET, probe)
    assert result.rho == 0.0 and result.failed == [0.8]


def test_tune_rho_all_diverged():
    with pytest.raises(NoViableRhoError):
        tune_sam_rho(None, [0.1, 0.2], T0, TARGET, FakeProbe(rho_cka={}, diverge_rhos={0.1, 0.2}))


@pytest.mark.parametrize("grid", [[], [-0.1]])
def test_tune_rho_rejects_bad_grid(grid):
    with pytest.raises(ValueError):
        tune_sam_rho(None, grid, T0, TARGET, FakeProbe())


# -- real probe --------------------------------------------------------------------

def test_real_probe_end_to_end(small_spirals, small_init):
    probe = Probe(small_spirals, cka_samples=small_spirals.train.features[:64])
    spec = TrainSpec.default(epochs=4, batch_size=32)
    dense, report = probe.train_dense(small_init, spec)
    out = probe.measure(dense, spec, PruneSpec("uniform", 0.5), alpha=2)
    assert out.lmc <= 0.01
    assert 0.0 <= out.cka <= 1.0 + 1e-9
    assert 0.0 <= out.test_error <= 1.0
