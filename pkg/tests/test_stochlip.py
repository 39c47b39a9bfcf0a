import numpy as np
import pytest

from stochcontract import detlip
from stochcontract.detlip import PairSamplingConfig
from stochcontract.models import DomainBox, builtin, scaled, without_noise
from stochcontract.norms import L1, L2, matrix_measure
from stochcontract.stochlip import (HALF_NORMAL_MEAN, SLLCConfig, bound_audit, classify, half_normal_mean,
                                    linear_diffusion_bound, prop5_bound_llc, prop5_bound_measure,
                                    sllc_estimate, sllc_reports)

BOX1 = DomainBox.cube(-2, 2, 1)
BOX2 = DomainBox.cube(-2, 2, 2)
FEW = PairSamplingConfig(num_pairs=30, refine=False)


def scalar(a, sigma):
    return builtin("scalar-linear", {"a": a, "sigma": sigma})


@pytest.mark.parametrize("a,sigma", [(-1.0, 0.5), (-0.5, 1.0), (0.3, 0.2)])
def test_ito_second_moment_oracle(a, sigma):
    cfg = SLLCConfig(BOX1, l=2, pairs=FEW, mc_samples=20000, seed=4)
    rep = sllc_estimate(scalar(a, sigma), cfg)
    target = 2 * a + sigma ** 2
    # the target can vanish, so the 5% is taken of the cancelling terms' size
    assert abs(rep.point_estimate - target) <= 0.05 * (abs(2 * a) + sigma ** 2)
    assert rep.ci95[0] - 1e-12 <= target <= rep.ci95[1] + 1e-12
    assert rep.ci95[0] <= rep.point_estimate <= rep.ci95[1]
    assert len(rep.per_h) == len(cfg.h_ladder)


def test_first_moment_oracle_scalar_linear():
    # E|1 + a h + sigma dW + sigma^2 (dW^2 - h)/2| expanded: l=1 gives a (odd terms cancel)
    cfg = SLLCConfig(BOX1, l=1, pairs=FEW, mc_samples=20000, seed=1)
    rep = sllc_estimate(scalar(-1.0, 0.5), cfg)
    assert rep.point_estimate == pytest.approx(-1.0, rel=0.05)


@pytest.mark.parametrize("l", [1, 2])
def test_zero_noise_reduces_to_mplus(l):
    vdp = without_noise(builtin("vanderpol-multiplicative", {"sigma": 0.35}))
    cfg = SLLCConfig(BOX2, l=l, pairs=FEW, mc_samples=1000)
    est = sllc_estimate(vdp, cfg).point_estimate
    mp = detlip.mplus_estimate(vdp, BOX2, L2, FEW).point_estimate
    assert est == pytest.approx(l * mp, rel=0.05)


def test_slub_not_above_lub():
    m = builtin("vanderpol-multiplicative", {"sigma": 0.35})
    slub, lub = sllc_reports(m, SLLCConfig(BOX2, l=2, pairs=FEW, mc_samples=1000))
    assert slub.point_estimate <= lub.point_estimate + 2 * lub.stderr + 1e-9


@pytest.mark.parametrize("alpha", [0.5, 2.0])
def test_scaling_identity(alpha):
    m = scalar(-1.0, 0.5)
    cfg = SLLCConfig(BOX1, l=2, pairs=FEW, mc_samples=20000, seed=3)
    base = sllc_estimate(m, cfg)
    sc = sllc_estimate(scaled(m, alpha), cfg)
    joint = 1.96 * np.hypot(alpha * base.stderr, sc.stderr)
    assert abs(sc.point_estimate - alpha * base.point_estimate) <= joint


def test_example_bound_values():
    for sigma in (0.1, 0.35, 1 / np.sqrt(8), 0.5):
        m = builtin("vanderpol-multiplicative", {"sigma": sigma})
        d = prop5_bound_measure(m, SLLCConfig(BOX2, l=2), detail=True)
        assert d["value"] == pytest.approx(2 * (1 - 8 * sigma ** 2), abs=1e-3)
        assert abs(d["noise_term"]) <= 1e-9


def test_additive_noise_bound_is_drift_only():
    add = builtin("vanderpol-additive", {"sigma": 0.7})
    cfg = SLLCConfig(BOX2, l=2)
    sup = detlip.sup_jacobian_measure(add, BOX2, L2).point_estimate
    assert prop5_bound_measure(add, cfg) == pytest.approx(2 * sup, abs=1e-9)


def test_linear_bounds():
    A = np.array([[-1.0, 0.4], [0.1, -2.0]])
    sig = 0.6
    m = builtin("linear", {"A": A.tolist(), "sigma": [sig]})
    cfg = SLLCConfig(BOX2, l=2, pairs=PairSamplingConfig(num_pairs=40))
    expected = 2 * (matrix_measure(A, L2) - sig ** 2 / 2)
    b14 = prop5_bound_measure(m, cfg)
    b13 = prop5_bound_llc(m, cfg)
    assert b14 == pytest.approx(expected, abs=1e-6)
    assert b13 == pytest.approx(b14, abs=1e-6)


def test_scalar_bound13():
    cfg = SLLCConfig(BOX1, l=2, pairs=FEW)
    assert prop5_bound_llc(scalar(-1.0, 0.5), cfg) == pytest.approx(-2.25, abs=1e-6)


def test_linear_diffusion_bound():
    A = np.array([[1.0, 0.0], [0.0, -1.0]])  # mu2 = 1
    m = builtin("linear", {"A": A.tolist(), "sigma": [2.0]})
    assert linear_diffusion_bound(m, [2.0], L2, BOX2) == pytest.approx(-1.0)
    m0 = builtin("linear", {"A": A.tolist(), "sigma": [0.0]})
    assert linear_diffusion_bound(m0, [0.0], L2, BOX2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        linear_diffusion_bound(builtin("vanderpol-multiplicative", {"sigma": 0.3}), [0.3], L2, BOX2)
    stable = np.array([[-1.0, 0.5], [0.0, -0.5]])
    for s in (0.0, 0.3, 1.5):
        ms = builtin("linear", {"A": stable.tolist(), "sigma": [s]})
        assert linear_diffusion_bound(ms, [s], L1, BOX2) <= matrix_measure(stable, L1) + 1e-12


def test_audit_surfaces_tension():
    cfg = SLLCConfig(BOX1, l=2, pairs=FEW, mc_samples=20000)
    rep = bound_audit(scalar(-1.0, 0.5), cfg)
    assert rep.estimate.point_estimate == pytest.approx(-1.75, rel=0.05)
    assert rep.bound13 == pytest.approx(-2.25, abs=1e-6)
    assert rep.bound14 == pytest.approx(-2.25, abs=1e-6)
    assert rep.relation == "estimate-exceeds-bound"
    assert set(rep.to_dict()) >= {"estimate", "ci95", "bound_eq13", "bound_eq14", "relation"}


def test_audit_zero_noise_consistent():
    m = without_noise(scalar(-1.0, 0.5))
    rep = bound_audit(m, SLLCConfig(BOX1, l=2, pairs=FEW))
    assert rep.relation == "consistent" or rep.estimate.point_estimate == pytest.approx(rep.bound14, abs=1e-3)


def test_classify():
    assert classify((-1.8, -1.7), (-2.25, -2.25)) == "estimate-exceeds-bound"
    assert classify((-3.0, -2.9), (-2.25, -2.0)) == "consistent"
    assert classify((-2.3, -2.2), (-2.25, -2.25)) == "inconclusive"


def test_vanderpol_audit_smoke():
    m = builtin("vanderpol-multiplicative", {"sigma": 0.35})
    rep = bound_audit(m, SLLCConfig(BOX2, l=1, pairs=FEW, mc_samples=1000))
    out = rep.to_dict()
    assert all(np.isfinite([out["estimate"], out["bound_eq13"], out["bound_eq14"], *out["ci95"]]))
    assert out["bound_eq14"] == pytest.approx(1 - 8 * 0.35 ** 2, abs=1e-3)


def test_half_normal_mean():
    assert half_normal_mean(10 ** 6) == pytest.approx(HALF_NORMAL_MEAN, rel=0.005)
    assert HALF_NORMAL_MEAN == pytest.approx(0.7979, abs=1e-4)


def test_config_validation():
    with pytest.raises(ValueError):
        SLLCConfig(BOX1, mc_samples=10)
    with pytest.raises(ValueError):
        SLLCConfig(BOX1, l=0.5)
    with pytest.raises(ValueError):
        SLLCConfig(BOX1, h_ladder=(1e-3, 8e-4, 6e-4))
    with pytest.raises(ValueError):
        sllc_estimate(scalar(-1, 0.5), SLLCConfig(BOX1, pairs=FEW), mode="max")


def test_estimator_is_deterministic():
    cfg = SLLCConfig(BOX1, l=2, pairs=FEW, mc_samples=1000, seed=8)
    a = sllc_estimate(scalar(-1.0, 0.5), cfg).to_dict()
    b = sllc_estimate(scalar(-1.0, 0.5), cfg).to_dict()
    assert a == b
