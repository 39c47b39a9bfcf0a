"""Milstein simulation of Ito SDEs driven by reproducible common noise.

Standard normals come from Philox keyed by ``(master_seed, realization)``
with the counter addressing ``step * d + component``; one 64-bit word maps
to one normal through the inverse CDF. A draw is therefore a pure function
of its four coordinates, and any chunking or thread layout reproduces the
same stream.
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .models import lg_tensor
from .norms import L2, NormSpec, _vector_norm_unchecked

BLOWUP_NORM = 1e12
UINT64_MAX = 2 ** 64 - 1


class UnsupportedNoiseError(ValueError):
    """Noncommutative multi-channel noise needs Levy areas, which are not simulated."""


class BlowUpError(FloatingPointError):
    def __init__(self, step, last_state):
        super().__init__(f"state left the finite region at step {step}")
        self.step = step
        self.last_state = last_state


def _check_key(master_seed, realization):
    if not (0 <= int(master_seed) <= UINT64_MAX):
        raise ValueError("master seed must be an unsigned 64-bit integer")
    if not (0 <= int(realization) <= UINT64_MAX):
        raise ValueError("realization index must be an unsigned 64-bit integer")


def standard_normals(master_seed, realization, start_step, num_steps, d):
    """Normals for steps ``[start_step, start_step + num_steps)``, shape ``(num_steps, d)``."""
    _check_key(master_seed, realization)
    offset = int(start_step) * d
    count = int(num_steps) * d
    block, skip = divmod(offset, 4)
    bg = np.random.Philox(key=[int(master_seed), int(realization)], counter=[block, 0, 0, 0])
    raw = bg.random_raw(skip + count)[skip:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u).reshape(num_steps, d)


@dataclass(frozen=True)
class WienerPlan:
    master_seed: int
    realization_index: int
    d: int
    h: float
    num_steps: int

    def __post_init__(self):
        _check_key(self.master_seed, self.realization_index)
        if not (self.h > 0 and np.isfinite(self.h)):
            raise ValueError("h must be positive")
        if self.num_steps < 1:
            raise ValueError("num_steps must be at least 1")
        if self.d < 1:
            raise ValueError("d must be at least 1")


@dataclass(frozen=True)
class MilsteinTerms:
    """Wiener increments ``dW`` (``(..., d)``) and double integrals ``dW2`` (``(..., d, d)``)."""

    dW: np.ndarray
    dW2: np.ndarray


def noise_mode(model):
    if model.d == 1:
        return "exact-1d"
    if model.commutative:
        return "commutative"
    return "reject"


def levy_terms(dW, h, mode="exact-1d"):
    """Double Ito integrals for one step (vectorized over leading axes).

    ``exact-1d``: ``(dW^2 - h)/2``. ``commutative``: diagonal
    ``(dW_j^2 - h)/2`` and off-diagonal ``dW_j dW_k / 2``, which is exact in
    the scheme whenever ``L_k G_j = L_j G_k``.
    """
    dW = np.asarray(dW, dtype=float)
    d = dW.shape[-1]
    if mode == "exact-1d":
        if d != 1:
            raise ValueError("exact-1d Levy terms need d = 1")
        return 0.5 * (dW * dW - h)[..., None]
    if mode == "reject" and d > 1:
        raise UnsupportedNoiseError(
            "d > 1 noise without commutativity is not supported (Levy areas are not simulated)")
    if mode not in ("commutative", "reject"):
        raise ValueError(f"unknown Levy mode {mode!r}")
    out = 0.5 * dW[..., :, None] * dW[..., None, :]
    idx = np.arange(d)
    out[..., idx, idx] -= 0.5 * h
    return out


def wiener_increments(plan, mode=None):
    """Increments and Levy terms for every step of ``plan`` (leading axis = step)."""
    xi = standard_normals(plan.master_seed, plan.realization_index, 0, plan.num_steps, plan.d)
    dW = np.sqrt(plan.h) * xi
    if mode is None:
        mode = "exact-1d" if plan.d == 1 else "reject"
    return MilsteinTerms(dW, levy_terms(dW, plan.h, mode))


def milstein_increment(F, G, LG, dW, dW2, h):
    """``h F_i + sum_j G_ij dW_j + sum_jk L_k G_ij dW2_jk`` from evaluated terms."""
    if G.shape[-1] == 1:
        return h * F + G[..., 0] * dW + LG[..., 0, 0] * dW2[..., 0]
    return (h * F + np.einsum("...ij,...j->...i", G, dW)
            + np.einsum("...ijk,...jk->...i", LG, dW2))


def milstein_step(model, x, h, terms, step=-1):
    """One Milstein step ``x + M(x)``.

    Raises BlowUpError (carrying ``step`` and the input state) when the
    result is non-finite or exceeds the blow-up norm.
    """
    x = np.asarray(x, dtype=float)
    dW = np.asarray(terms.dW, dtype=float)
    dW2 = np.asarray(terms.dW2, dtype=float)
    if dW.shape[-1] != model.d or dW2.shape[-2:] != (model.d, model.d):
        raise ValueError("Milstein terms do not match the Wiener dimension")
    if model.d > 1 and not model.noise_commutes:
        raise UnsupportedNoiseError("noncommutative noise is not supported")
    with np.errstate(all="ignore"):
        new = x + milstein_increment(model.drift(x), model.diffusion(x), lg_tensor(model, x), dW, dW2, h)
    if not np.all(np.isfinite(new)) or np.any(np.linalg.norm(new, axis=-1) > BLOWUP_NORM):
        raise BlowUpError(step, x)
    return new


def _euler_step(model, x, h, dW):
    # reference scheme for convergence cross-checks only
    G = model.diffusion(x)
    return x + h * model.drift(x) + np.einsum("...ij,...j->...i", G, dW)


def step_count(T, h):
    if not (h > 0 and np.isfinite(h)):
        raise ValueError("h must be positive")
    if not (T > 0 and np.isfinite(T)):
        raise ValueError("T must be positive")
    k = int(round(T / h))
    if k < 1 or abs(k * h - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not an integer multiple of h={h}")
    return k


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    blown_up: bool = False
    blowup_step: int = -1
    last_finite: np.ndarray | None = None


@dataclass
class EnsembleResult:
    """Recorded states of an ensemble, ``states[r, k, i]`` for realization ``r``,
    recorded time ``k`` and trajectory ``i`` (each an ``n``-vector).

    Rows of a realization that blew up are NaN from the recorded time after
    the blow-up onward; ``blowup_step`` is ``-1`` for healthy realizations.
    """

    times: np.ndarray
    states: np.ndarray
    realizations: np.ndarray
    blowup_step: np.ndarray
    last_finite: np.ndarray
    h: float
    seed: int
    digests: list = field(default_factory=list)

    @property
    def blown(self):
        return self.blowup_step >= 0

    @property
    def blowup_fraction(self):
        return float(np.mean(self.blown)) if len(self.blown) else 0.0

    def trajectories(self, r):
        return [Trajectory(self.times, self.states[r, :, i], bool(self.blown[r]),
                           int(self.blowup_step[r]), self.last_finite[r, i])
                for i in range(self.states.shape[2])]


def _simulate_block(model, X0, h, num_steps, record_every, seed, reals, mode, chunk_steps, instrument):
    B = len(reals)
    m, n = X0.shape
    d = model.d
    K = num_steps // record_every + 1
    out = np.empty((B, K, m, n))
    X = np.broadcast_to(X0, (B, m, n)).copy()
    out[:, 0] = X
    alive = np.ones(B, dtype=bool)
    blow = np.full(B, -1, dtype=np.int64)
    last = X.copy()
    sqrt_h = np.sqrt(h)
    hashers = [hashlib.blake2b(digest_size=16) for _ in range(B)] if instrument else None
    k = 1
    for start in range(0, num_steps, chunk_steps):
        count = min(chunk_steps, num_steps - start)
        xi = np.stack([standard_normals(seed, r, start, count, d) for r in reals])
        if instrument:
            for b in range(B):
                hashers[b].update(np.ascontiguousarray(xi[b]).tobytes())
        dW_chunk = sqrt_h * xi
        dW2_chunk = levy_terms(dW_chunk, h, mode)
        for s in range(count):
            dW = dW_chunk[:, s][:, None, :]
            dW2 = dW2_chunk[:, s][:, None, :, :]
            prev = X
            with np.errstate(all="ignore"):
                X = X + milstein_increment(model.drift(X), model.diffusion(X), lg_tensor(model, X), dW, dW2, h)
                size = np.abs(X).max(axis=(1, 2))
            bad = alive & ~(size <= BLOWUP_NORM)
            if bad.any():
                blow[bad] = start + s + 1
                last[bad] = prev[bad]
                alive &= ~bad
                X[bad] = np.nan
            step = start + s + 1
            if step % record_every == 0:
                out[:, k] = X
                k += 1
    last[alive] = X[alive]
    digests = [hs.hexdigest() for hs in hashers] if instrument else []
    return out, blow, last, digests


def simulate_ensemble(model, initials, T, h, seed, realizations, record_every=1, threads=1,
                      block_size=512, chunk_steps=1024, instrument=False):
    """Simulate every initial state under common noise for many realizations.

    Realization ``r`` uses the stream keyed by ``(seed, r)`` and all
    trajectories of that realization consume it. Work is split into blocks
    of ``block_size`` realizations regardless of ``threads``, so results are
    bit-identical for any thread count.
    """
    initials = np.atleast_2d(np.asarray(initials, dtype=float))
    if initials.shape[1] != model.n:
        raise ValueError(f"initial states must have dimension {model.n}")
    if not np.all(np.isfinite(initials)):
        raise ValueError("initial states must be finite")
    num_steps = step_count(T, h)
    if record_every < 1 or num_steps % record_every:
        raise ValueError("record_every must divide the number of steps")
    mode = noise_mode(model)
    if mode == "reject":
        raise UnsupportedNoiseError(
            f"model {model.name!r} has d={model.d} noncommutative noise; Levy areas are not simulated")
    if isinstance(realizations, (int, np.integer)):
        realizations = np.arange(int(realizations))
    reals = np.asarray(realizations, dtype=np.uint64)
    if reals.size == 0:
        raise ValueError("need at least one realization")
    blocks = [reals[i:i + block_size] for i in range(0, len(reals), block_size)]

    def run(block):
        return _simulate_block(model, initials, h, num_steps, record_every, seed, block, mode,
                               chunk_steps, instrument)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    times = np.arange(0, num_steps + 1, record_every) * h
    return EnsembleResult(
        times=times,
        states=np.concatenate([p[0] for p in parts]),
        realizations=reals,
        blowup_step=np.concatenate([p[1] for p in parts]),
        last_finite=np.concatenate([p[2] for p in parts]),
        h=h, seed=seed,
        digests=[dg for p in parts for dg in p[3]],
    )


def simulate_shared(model, initials, T, h, seed, realization_index=0, record_every=1):
    """All ``initials`` advanced by one shared Wiener realization."""
    res = simulate_ensemble(model, initials, T, h, seed, [realization_index], record_every)
    return res.trajectories(0)


@dataclass
class DivergenceSeries:
    times: np.ndarray
    moment: np.ndarray
    stderr: np.ndarray
    n_realizations: np.ndarray
    l: float

    def rows(self):
        return zip(self.times, self.moment, self.stderr, self.n_realizations)


def separations(X, Y, norm=L2):
    """``|X - Y|`` per realization and time; NaN where either side blew up."""
    norm = NormSpec.parse(norm)
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape:
        raise ValueError(f"ensemble grids differ: {X.shape} vs {Y.shape}")
    diff = X - Y
    with np.errstate(invalid="ignore"):
        return _vector_norm_unchecked(diff, norm)


def moment_divergence(X, Y, times, l=2, norm=L2):
    """Monte Carlo ``E|X(t) - Y(t)|^l`` with per-time standard errors.

    ``X`` and ``Y`` have shape ``(R, K, n)``. Realizations with non-finite
    states are excluded at the affected times.
    """
    if l < 1:
        raise ValueError("moment order l must be at least 1")
    times = np.asarray(times, dtype=float)
    sep = separations(X, Y, norm)
    if sep.shape[1] != times.size:
        raise ValueError("time grid does not match the ensembles")
    vals = sep ** l
    ok = np.isfinite(vals)
    cnt = ok.sum(axis=0)
    v0 = np.where(ok, vals, 0.0)
    safe = np.maximum(cnt, 1)
    mean = v0.sum(axis=0) / safe
    var = (np.where(ok, (vals - mean) ** 2, 0.0)).sum(axis=0) / np.maximum(cnt - 1, 1)
    se = np.sqrt(var / safe)
    mean = np.where(cnt > 0, mean, np.nan)
    return DivergenceSeries(times, mean, se, cnt, l)
