"""Deterministic logarithmic Lipschitz constants on a box.

``M+`` (s-lub) takes the ``h -> 0`` limit per pair and then the sup over
pairs; ``M`` (lub) takes the sup per step size first. Both suprema are
approximated by a finite pair sample, so every number produced here is a
lower estimate of the true constant restricted to the box.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ._fit import check_ladder, intercept_weights, smallest_rungs
from .models import SystemModel, VectorField
from .norms import L2, NormSpec, _vector_norm_unchecked, matrix_measure
from .reports import LOWER_ESTIMATE, EstimateReport

DEFAULT_LADDER = (1e-3, 5e-4, 2.5e-4, 1.25e-4)
MAX_SIGN_DIM = 10
DEGENERATE = 1e-12


@dataclass(frozen=True)
class PairSamplingConfig:
    """How the sup over ``u != v`` is discretized.

    ``pair_scales`` are separations as fractions of the box diameter. Each
    random center is paired along one random direction plus the structured
    directions (coordinate axes and sign vectors, mapped through the inverse
    weight), which are where polyhedral norms attain their measures.
    Refinement runs Nelder-Mead from the best ``refine_top`` pairs and adds
    the optima to the sample.
    """

    num_pairs: int = 200
    pair_scales: tuple = (1.0, 1e-2, 1e-4)
    rng_seed: int = 0
    structured: bool = True
    refine: bool = True
    refine_top: int = 3
    refine_maxiter: int = 400

    def __post_init__(self):
        if self.num_pairs < 1:
            raise ValueError("num_pairs must be at least 1")
        scales = tuple(float(s) for s in self.pair_scales)
        if not scales or any(not (0 < s <= 1) for s in scales):
            raise ValueError("pair scales must lie in (0, 1] (fractions of the box diameter)")
        object.__setattr__(self, "pair_scales", scales)

    def describe(self):
        return {"num_pairs": self.num_pairs, "pair_scales": list(self.pair_scales),
                "rng_seed": self.rng_seed, "structured": self.structured,
                "refine": self.refine, "refine_top": self.refine_top}


def as_field(F):
    if isinstance(F, SystemModel):
        return F.drift_field()
    if isinstance(F, VectorField):
        return F
    raise TypeError("expected a VectorField or SystemModel")


def structured_directions(n, norm):
    dirs = [np.eye(n)[i] for i in range(n)]
    if 1 < n <= MAX_SIGN_DIM:
        for bits in range(2 ** (n - 1)):
            s = np.ones(n)
            for i in range(1, n):
                if bits >> (i - 1) & 1:
                    s[i] = -1.0
            dirs.append(s)
    D = np.array(dirs)
    if norm.weight is not None:
        D = D @ norm.weight_inverse.T
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    # drop duplicates (n=1 produces the axis twice)
    keep = []
    for v in D:
        if not any(np.allclose(v, w) or np.allclose(v, -w) for w in keep):
            keep.append(v)
    return np.array(keep)


def _place(domain, center, direction, separation):
    """Pair ``center +- t*half`` kept inside the box; returns None if degenerate."""
    c = np.clip(center, domain.lo, domain.hi)
    norm_w = np.linalg.norm(direction)
    if not np.isfinite(norm_w) or norm_w == 0:
        return None
    half = 0.5 * separation * direction / norm_w
    with np.errstate(divide="ignore", invalid="ignore"):
        room = np.minimum(domain.hi - c, c - domain.lo) / np.abs(half)
    room = np.where(np.abs(half) > 0, room, np.inf)
    t = min(1.0, float(np.min(room)))
    if 2 * t * np.linalg.norm(half) < DEGENERATE * domain.diameter:
        return None
    return c + t * half, c - t * half


def sample_pairs(domain, norm, cfg):
    """Pairs ``(U, V)`` of shape ``(P, n)`` and the scale index of each pair."""
    rng = np.random.default_rng(cfg.rng_seed)
    n = domain.n
    centers = domain.sample(rng, cfg.num_pairs)
    rand_dirs = rng.standard_normal((cfg.num_pairs, n))
    struct = structured_directions(n, norm) if cfg.structured else np.zeros((0, n))
    U, V, S = [], [], []
    for ci in range(cfg.num_pairs):
        dirs = [rand_dirs[ci], *struct]
        for si, s in enumerate(cfg.pair_scales):
            for w in dirs:
                placed = _place(domain, centers[ci], w, s * domain.diameter)
                if placed is None:
                    continue
                U.append(placed[0])
                V.append(placed[1])
                S.append(si)
    if not U:
        raise ValueError("all sampled pairs were degenerate")
    return np.array(U), np.array(V), np.array(S)


def _quotients(field, U, V, norm, h):
    """``(|u - v + h(F(u) - F(v))| / |u - v| - 1) / h`` for each pair and h."""
    delta = U - V
    dF = field(U) - field(V)
    if not np.all(np.isfinite(dF)):
        raise ValueError("non-finite field values at sampled pairs")
    base = _vector_norm_unchecked(delta, norm)
    out = np.empty((len(U), len(h)))
    for r, hr in enumerate(h):
        out[:, r] = (_vector_norm_unchecked(delta + hr * dF, norm) / base - 1.0) / hr
    return out


def refine_pairs(objective, domain, starts, maxiter=400):
    """Locally maximize ``objective(u, v)`` from each ``(u, v)`` in ``starts``.

    The pair is parametrized by center and direction at the start's
    separation. Returns the optimized pairs (deterministic).
    """
    found = []
    for u0, v0 in starts:
        sep = float(np.linalg.norm(u0 - v0))
        n = u0.size
        x0 = np.concatenate([0.5 * (u0 + v0), (u0 - v0) / sep])

        def neg(p):
            placed = _place(domain, p[:n], p[n:], sep)
            if placed is None:
                return np.inf
            return -objective(*placed)

        res = minimize(neg, x0, method="Nelder-Mead",
                       options={"maxiter": maxiter, "xatol": 1e-10, "fatol": 1e-14})
        placed = _place(domain, res.x[:n], res.x[n:], sep)
        if placed is not None:
            found.append(placed)
    return found


def mplus_estimate(F, domain, norm=L2, pairs=None, h_ladder=DEFAULT_LADDER, mode="slub"):
    """Sampled logarithmic Lipschitz constant of ``F`` on ``domain``.

    ``mode="slub"`` estimates ``M+`` (limit per pair, then max);
    ``mode="lub"`` estimates ``M`` (max per step, then limit). The limit is
    a linear least-squares extrapolation over the three smallest rungs.
    """
    field = as_field(F)
    norm = NormSpec.parse(norm)
    pairs = pairs or PairSamplingConfig()
    h = check_ladder(h_ladder)
    idx = smallest_rungs(h)
    c = intercept_weights(h[idx])

    U, V, _ = sample_pairs(domain, norm, pairs)
    Q = _quotients(field, U, V, norm, h)

    if pairs.refine and pairs.refine_top > 0:
        intercepts = Q[:, idx] @ c
        top = np.argsort(-intercepts, kind="stable")[: pairs.refine_top]

        h_fit = h[idx]

        def objective(u, v):
            return float(_quotients(field, u[None], v[None], norm, h_fit)[0] @ c)

        extra = refine_pairs(objective, domain, [(U[i], V[i]) for i in top], pairs.refine_maxiter)
        if extra:
            U = np.vstack([U, [p[0] for p in extra]])
            V = np.vstack([V, [p[1] for p in extra]])
            Q = np.vstack([Q, _quotients(field, U[-len(extra):], V[-len(extra):], norm, h)])

    counts = {"pairs": len(U), "rungs": len(h)}
    if mode == "slub":
        intercepts = Q[:, idx] @ c
        best = int(np.argmax(intercepts))
        est = float(intercepts[best])
        trace = [(hr, Q[best, r], 0.0) for r, hr in enumerate(h)]
        return EstimateReport(est, (est, est), trace, (U[best], V[best]), None,
                              (LOWER_ESTIMATE,), "slub", counts)
    if mode == "lub":
        per_h = Q.max(axis=0)
        est = float(per_h[idx] @ c)
        trace = [(hr, per_h[r], 0.0) for r, hr in enumerate(h)]
        best = int(np.argmax(Q[:, idx[0]]))
        return EstimateReport(est, (est, est), trace, (U[best], V[best]), None,
                              (LOWER_ESTIMATE,), "lub", counts)
    raise ValueError(f"unknown mode {mode!r}; expected 'slub' or 'lub'")


def jacobian_measures(F, points, norm=L2, chunk=65536):
    field = as_field(F)
    out = np.empty(len(points))
    for start in range(0, len(points), chunk):
        J = field.jacobian(points[start:start + chunk])
        out[start:start + chunk] = matrix_measure(J, norm)
    return out


def sup_jacobian_measure(F, domain, norm=L2, grid=41):
    """Largest ``mu[J_F(x)]`` over a regular grid on the box."""
    norm = NormSpec.parse(norm)
    points = domain.grid(grid)
    mu = jacobian_measures(F, points, norm)
    best = int(np.argmax(mu))
    est = float(mu[best])
    return EstimateReport(est, (est, est), [], None, points[best], (LOWER_ESTIMATE,),
                          "grid", {"grid_points": len(points)})


@dataclass(frozen=True)
class ContractionVerdict:
    contractive: bool
    rate: float
    verdict: str
    argmax_point: np.ndarray

    def to_dict(self):
        return {"contractive": self.contractive, "rate": self.rate, "verdict": self.verdict,
                "argmax_point": self.argmax_point.tolist()}


def ode_contraction_check(F, domain, norm=L2, grid=41, c=None, margin=1e-6):
    """Grid certificate of ODE contractivity from ``sup mu[J_F]``.

    Contractive when the grid sup is ``<= -c`` (or below ``-margin`` when no
    rate is requested); otherwise the verdict is ``"unknown"`` since a
    nonnegative sup in one norm does not rule out contraction in another.
    """
    rep = sup_jacobian_measure(F, domain, norm, grid)
    threshold = -float(c) if c is not None else -margin
    ok = rep.point_estimate <= threshold
    verdict = "contractive (certified on grid)" if ok else "unknown"
    return ContractionVerdict(bool(ok), rep.point_estimate, verdict, rep.argmax_point)
