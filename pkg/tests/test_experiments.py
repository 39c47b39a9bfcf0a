import numpy as np
import pytest

from stochcontract import detlip
from stochcontract.experiments import (NonPositiveSeriesError, contraction_experiment, decay_rate_fit,
                                       fit_with_shrink, is_decreasing, pathwise_rate, record_stride,
                                       sigma_threshold_scan, sync_experiment)
from stochcontract.models import DomainBox, builtin
from stochcontract.norms import L2
from stochcontract.stochlip import SLLCConfig

SCALAR = builtin("scalar-linear", {"a": -1.0, "sigma": 0.5})


def test_decay_rate_fit_examples():
    t = np.linspace(0, 1, 21)
    assert decay_rate_fit(t, np.exp(-2 * t), (0, 1)) == pytest.approx(-2.0, abs=1e-9)
    assert decay_rate_fit(t, 3 * np.exp(0.5 * t)) == pytest.approx(0.5, abs=1e-9)


def test_decay_rate_fit_noisy_regression_oracle():
    rng = np.random.default_rng(0)
    t = np.linspace(0, 10, 200)
    v = np.exp(-0.8 * t) * (1 + 0.05 * rng.standard_normal(t.size))
    assert decay_rate_fit(t, v) == pytest.approx(-0.8, rel=0.05)


def test_decay_rate_fit_errors_and_shrink():
    t = np.linspace(0, 1, 21)
    with pytest.raises(ValueError):
        decay_rate_fit(t[:5], np.ones(5))
    v = np.exp(-t)
    v[15:] = 0.0
    with pytest.raises(NonPositiveSeriesError) as info:
        decay_rate_fit(t, v)
    assert info.value.index == 15
    rate, window, note = fit_with_shrink(t, v, (0.0, 1.0))
    assert rate == pytest.approx(-1.0) and window[1] == pytest.approx(t[14]) and "shrunk" in note


def test_is_decreasing_and_pathwise_rate():
    t = np.linspace(0, 10, 101)
    assert is_decreasing(t, np.exp(-t), 1, 10)
    assert not is_decreasing(t, np.ones_like(t), 1, 10)
    bumpy = np.exp(-t)
    bumpy[30] *= 1.5
    assert not is_decreasing(t, bumpy, 1, 10)
    assert is_decreasing(t, bumpy, 1, 10, stderr=0.5 * bumpy)
    sep = np.exp(-np.outer([1.0, 2.0, 3.0], t))
    assert pathwise_rate(t, sep, (0, 10)) == pytest.approx(-2.0)


def test_record_stride():
    assert record_stride(50.0, 1e-3, 0.05) == 50
    assert record_stride(1.0, 0.3 / 3, 0.05) == 1
    assert record_stride(0.7, 1e-2, 0.3) == 14


def test_scalar_linear_experiment():
    rep = contraction_experiment(SCALAR, ([1.0], [2.0]), l=2, T=2.0, h=1e-3, realizations=4000, seed=5,
                                 domain=DomainBox.cube(-2, 2, 1),
                                 sllc_cfg=SLLCConfig(DomainBox.cube(-2, 2, 1), l=2, mc_samples=5000))
    assert rep.fitted_rate == pytest.approx(-1.75, rel=0.1)
    assert rep.pathwise_rate == pytest.approx(-1.0 - 0.125, rel=0.1)
    assert rep.bound_rate == pytest.approx(-2.25, abs=1e-6)
    assert rep.verdicts["monotone_decay"]
    s = rep.divergence
    # verdicts are functions of the recorded numbers only
    env = np.exp(rep.sllc.point_estimate * s.times)
    se = np.hypot(s.stderr, env * s.times * rep.sllc.stderr)
    assert rep.verdicts["below_rate_envelope"] == bool(np.all(s.moment <= env + 2 * se))
    assert np.all(np.abs(s.moment - np.exp(-1.75 * s.times)) <= 3 * s.stderr + 1e-12)


def test_zero_noise_matches_ode_rate():
    for a in (-1.0, -0.3):
        m = builtin("scalar-linear", {"a": a, "sigma": 0.0})
        rep = contraction_experiment(m, ([1.0], [2.0]), l=2, T=2.0, h=1e-4, realizations=2, seed=0)
        mp = detlip.mplus_estimate(m, DomainBox.cube(-2, 2, 1), L2).point_estimate
        assert rep.fitted_rate == pytest.approx(2 * mp, abs=1e-3)


def test_sync_pair_matches_contraction_bitwise():
    m = builtin("vanderpol-multiplicative", {"sigma": 0.5})
    init = [[1.0, -1.0], [2.0, -2.0]]
    c = contraction_experiment(m, init, T=1.0, h=1e-3, realizations=30, seed=4)
    s = sync_experiment(m, init, T=1.0, h=1e-3, realizations=30, seed=4)
    assert s.pairwise[(0, 1)].moment.tobytes() == c.divergence.moment.tobytes()
    assert s.pairwise[(0, 1)].stderr.tobytes() == c.divergence.stderr.tobytes()


def test_sync_identical_initials_stay_together():
    m = builtin("vanderpol-multiplicative", {"sigma": 0.5})
    s = sync_experiment(m, [[1.0, 0.5]] * 3, T=0.5, h=1e-3, realizations=10, seed=1)
    assert all(np.all(series.moment == 0) for series in s.pairwise.values())
    assert s.verdicts["synchronized"]


def test_sync_scalar_three_systems():
    s = sync_experiment(SCALAR, [[1.0], [2.0], [-1.5]], T=2.0, h=1e-3, realizations=4000, seed=2)
    assert len(s.pairwise) == 3
    for series in s.pairwise.values():
        rate = decay_rate_fit(series.times, series.moment, (0.2, 1.2))
        assert rate == pytest.approx(-1.75, rel=0.1)


def test_sync_symmetry():
    m = builtin("vanderpol-multiplicative", {"sigma": 0.5})
    s1 = sync_experiment(m, [[1.0, -1.0], [2.0, -2.0]], T=0.5, h=1e-3, realizations=10, seed=3)
    s2 = sync_experiment(m, [[2.0, -2.0], [1.0, -1.0]], T=0.5, h=1e-3, realizations=10, seed=3)
    np.testing.assert_array_equal(s1.pairwise[(0, 1)].moment, s2.pairwise[(0, 1)].moment)


def test_sigma_scan_bounds():
    rows = sigma_threshold_scan([0.1, 0.3536, 0.5], simulate=False)
    b = [r["bound14"] for r in rows]
    assert b[0] == pytest.approx(1.84, abs=1e-3)
    assert b[1] == pytest.approx(0.0, abs=1e-3)
    assert b[2] == pytest.approx(-2.0, abs=1e-3)
    with pytest.raises(ValueError):
        sigma_threshold_scan([0.0], simulate=False)


def test_sigma_scan_with_simulation_small():
    rows = sigma_threshold_scan([0.5], simulate=True, T=2.0, realizations=20)
    assert np.isfinite(rows[0]["fitted_rate"]) and np.isfinite(rows[0]["pathwise_rate"])


@pytest.mark.slow
def test_sync_five_vanderpol_oscillators():
    m = builtin("vanderpol-multiplicative", {"sigma": 0.5})
    init = [[1.0, -1.0], [2.0, -2.0], [-1.0, 0.5], [0.5, 1.5], [-2.0, -1.0]]
    s = sync_experiment(m, init, T=50.0, h=1e-3, realizations=100, seed=0)
    assert s.verdicts["synchronized"]
