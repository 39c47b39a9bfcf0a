import numpy as np
import pytest

from stochcontract.models import builtin, from_functions, without_noise
from stochcontract.norms import L2
from stochcontract.sde import (BlowUpError, MilsteinTerms, UnsupportedNoiseError, WienerPlan, levy_terms,
                               milstein_step, moment_divergence, separations, simulate_ensemble,
                               simulate_shared, standard_normals, step_count, wiener_increments)

SCALAR = builtin("scalar-linear", {"a": -1.0, "sigma": 0.5})


def strong_error(a, sigma, h, T=1.0, R=1000, seed=7):
    m = builtin("scalar-linear", {"a": a, "sigma": sigma})
    K = step_count(T, h)
    ens = simulate_ensemble(m, [[1.0]], T, h, seed, R, record_every=K)
    W = np.array([np.sqrt(h) * standard_normals(seed, r, 0, K, 1).sum() for r in range(R)])
    exact = np.exp((a - 0.5 * sigma ** 2) * T + sigma * W)
    return float(np.mean(np.abs(ens.states[:, -1, 0, 0] - exact)))


def test_streams_are_deterministic_and_random_access():
    a = standard_normals(3, 5, 0, 100, 2)
    np.testing.assert_array_equal(a, standard_normals(3, 5, 0, 100, 2))
    np.testing.assert_array_equal(a[37:61], standard_normals(3, 5, 37, 24, 2))
    np.testing.assert_array_equal(a[1:2], standard_normals(3, 5, 1, 1, 2))
    plan = WienerPlan(3, 5, 2, 0.01, 100)
    t1, t2 = wiener_increments(plan, "commutative"), wiener_increments(plan, "commutative")
    np.testing.assert_array_equal(t1.dW, t2.dW)


def test_increment_statistics():
    h = 0.01
    dW = wiener_increments(WienerPlan(1, 0, 1, h, 10 ** 6)).dW[:, 0]
    assert np.var(dW) == pytest.approx(h, rel=0.01)
    assert abs(np.mean(dW)) < 4 * np.sqrt(h / 1e6)
    other = wiener_increments(WienerPlan(1, 1, 1, h, 10 ** 6)).dW[:, 0]
    assert abs(np.corrcoef(dW, other)[0, 1]) < 0.01
    terms = wiener_increments(WienerPlan(1, 0, 1, h, 10 ** 6))
    N = 10 ** 6
    assert abs(terms.dW2.mean()) < 4 * np.sqrt(h * h / 2) / np.sqrt(N)


def test_seed_validation():
    with pytest.raises(ValueError):
        standard_normals(-1, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        WienerPlan(0, 0, 1, -0.1, 10)


def test_levy_examples():
    assert levy_terms(np.array([0.1]), 0.04)[0, 0] == pytest.approx(-0.015)
    L = levy_terms(np.array([0.1, 0.2]), 0.01, "commutative")
    assert L[0, 1] == pytest.approx(0.01) and L[1, 0] == pytest.approx(0.01)
    assert L[0, 0] == pytest.approx(0.5 * (0.01 - 0.01))
    with pytest.raises(UnsupportedNoiseError):
        levy_terms(np.array([0.1, 0.2]), 0.01, "reject")


def test_milstein_step_examples():
    m = builtin("scalar-linear", {"a": 0.0, "sigma": 1.0})
    dW = np.array([0.05])
    terms = MilsteinTerms(dW, levy_terms(dW, 0.01))
    assert milstein_step(m, np.array([1.0]), 0.01, terms)[0] == pytest.approx(1.04625, abs=1e-15)
    vdp = builtin("vanderpol-multiplicative", {"sigma": 0.3})
    quiet = without_noise(vdp)
    x = np.array([0.7, -0.2])
    np.testing.assert_array_equal(milstein_step(quiet, x, 0.01, terms), x + 0.01 * vdp.drift(x))


def test_milstein_two_dim_noise_matches_hand_formula():
    B = [[[0.3, 0.0], [0.0, 0.3]], [[0.1, 0.0], [0.0, 0.2]]]
    m = builtin("linear", {"A": [[-1.0, 0.0], [0.0, -1.0]], "B": B})
    Bm = np.array(B)
    x = np.array([1.0, 2.0])
    dW = np.array([0.05, -0.02])
    h = 0.01
    L = levy_terms(dW, h, "commutative")
    expected = x + h * (-x) + sum(Bm[j] @ x * dW[j] for j in range(2))
    expected = expected + sum(Bm[j] @ Bm[k] @ x * L[j, k] for j in range(2) for k in range(2))
    got = milstein_step(m, x, h, MilsteinTerms(dW, L))
    np.testing.assert_allclose(got, expected, atol=1e-15)


def test_noncommutative_rejected():
    m = builtin("linear", {"A": np.eye(2).tolist(), "B": [[[0, 1], [0, 0]], [[0, 0], [1, 0]]]})
    with pytest.raises(UnsupportedNoiseError):
        simulate_ensemble(m, [[1.0, 0.0]], 0.1, 0.01, 0, 2)


def test_blowup_detected():
    m = from_functions("explosive", 1, 1, lambda x: x ** 3, lambda x: np.zeros(x.shape + (1,)),
                       lambda x: (3 * x ** 2)[..., None], lambda x: np.zeros(x.shape[:-1] + (1, 1, 1)))
    dW = np.zeros(1)
    with pytest.raises(BlowUpError) as info:
        milstein_step(m, np.array([1e5]), 1.0, MilsteinTerms(dW, np.zeros((1, 1))), step=12)
    assert info.value.step == 12
    ens = simulate_ensemble(m, [[1.0], [0.1]], 5.0, 0.5, 0, 3)
    assert ens.blown.all() and ens.blowup_fraction == 1.0
    assert np.isnan(ens.states[0, -1, 0, 0])
    assert np.all(np.isfinite(ens.last_finite[0]))
    traj = ens.trajectories(0)
    assert traj[0].blown_up and traj[0].blowup_step > 0


def test_deterministic_ode_solution():
    m = builtin("scalar-linear", {"a": -1.0, "sigma": 0.0})
    tr = simulate_shared(m, [[1.0]], 1.0, 1e-4, 0)
    assert tr[0].states[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-3)


def test_equal_initials_identical_and_common_noise():
    vdp = builtin("vanderpol-multiplicative", {"sigma": 0.35})
    tr = simulate_shared(vdp, [[1.0, -1.0], [1.0, -1.0], [2.0, -2.0]], 1.0, 1e-3, 9)
    np.testing.assert_array_equal(tr[0].states, tr[1].states)
    ens = simulate_ensemble(vdp, [[1.0, -1.0], [2.0, -2.0]], 0.5, 1e-3, 9, 4, instrument=True)
    ens_b = simulate_ensemble(vdp, [[0.0, 0.0]], 0.5, 1e-3, 9, 4, instrument=True)
    assert ens.digests == ens_b.digests
    assert len(set(ens.digests)) == 4


def test_thread_and_block_independence():
    vdp = builtin("vanderpol-multiplicative", {"sigma": 0.35})
    kw = dict(initials=[[1.0, -1.0], [2.0, -2.0]], T=0.5, h=1e-3, seed=3, realizations=40, record_every=10)
    a = simulate_ensemble(vdp, threads=1, block_size=8, **kw)
    b = simulate_ensemble(vdp, threads=8, block_size=8, **kw)
    c = simulate_ensemble(vdp, threads=1, block_size=8, chunk_steps=7, **kw)
    assert a.states.tobytes() == b.states.tobytes() == c.states.tobytes()
    sub = simulate_ensemble(vdp, **{**kw, "realizations": [5, 17]})
    np.testing.assert_array_equal(sub.states, a.states[[5, 17]])


def test_moment_divergence_basics():
    vdp = builtin("vanderpol-multiplicative", {"sigma": 0.35})
    ens = simulate_ensemble(vdp, [[1.0, -1.0], [1.0, -1.0]], 0.2, 1e-2, 0, 5)
    s = moment_divergence(ens.states[:, :, 0], ens.states[:, :, 1], ens.times)
    assert np.all(s.moment == 0)
    X = np.random.default_rng(0).standard_normal((50, 3, 2))
    Y = np.zeros_like(X)
    s1 = moment_divergence(X, Y, [0, 1, 2], l=2)
    s2 = moment_divergence(Y, X, [0, 1, 2], l=2)
    np.testing.assert_array_equal(s1.moment, s2.moment)
    np.testing.assert_allclose(s1.moment, (X ** 2).sum(-1).mean(0))
    X[3, 1] = np.nan
    s3 = moment_divergence(X, Y, [0, 1, 2])
    assert list(s3.n_realizations) == [50, 49, 50]
    assert separations(X, Y, L2).shape == (50, 3)
    with pytest.raises(ValueError):
        moment_divergence(X, Y, [0, 1])


def test_step_count_validation():
    assert step_count(1.0, 1e-3) == 1000
    with pytest.raises(ValueError, match="h must be positive"):
        step_count(1.0, -1e-3)
    with pytest.raises(ValueError):
        step_count(1.0, 0.3)


def test_second_moment_oracle_short():
    a, sigma, T, h = -1.0, 0.5, 1.0, 1e-3
    ens = simulate_ensemble(SCALAR, [[1.0], [2.0]], T, h, 2, 10 ** 4, record_every=100)
    s = moment_divergence(ens.states[:, :, 0], ens.states[:, :, 1], ens.times)
    np.testing.assert_allclose(s.moment, np.exp((2 * a + sigma ** 2) * s.times), rtol=0.1)


def test_strong_order_one():
    e1 = strong_error(-1.0, 0.5, 1e-3)
    e2 = strong_error(-1.0, 0.5, 5e-4)
    assert 1.7 <= e1 / e2 <= 2.3
