"""Monte Carlo stochastic logarithmic Lipschitz constants and their bounds.

For a pair ``(u, v)`` and step ``h`` the estimator averages

    (|u - v + M(u) - M(v)|^l / |u - v|^l - 1) / h

over Wiener draws, where ``M`` is the one-step Milstein operator with
``dW = sqrt(h) xi``. The same draws ``xi`` are reused for every pair and every
rung of the ladder, and each draw is used together with ``-xi``. The
antithetic average cancels the ``O(h^-1/2)`` odd part of the quotient, which
otherwise swamps the ``h -> 0`` extrapolation.
"""

from dataclasses import dataclass, field

import numpy as np

from . import detlip
from ._fit import check_ladder, intercept_weights, smallest_rungs
from .detlip import PairSamplingConfig, sample_pairs, refine_pairs
from .models import DomainBox, lg_tensor
from .norms import L2, NormSpec, _vector_norm_unchecked
from .reports import LOWER_ESTIMATE, EstimateReport
from .sde import UnsupportedNoiseError, levy_terms, noise_mode, standard_normals

DEFAULT_SLLC_LADDER = (8e-4, 4e-4, 2e-4, 1e-4)
MIN_MC_SAMPLES = 1000
HALF_NORMAL_MEAN = np.sqrt(2.0 / np.pi)
# counter key reserved for estimator draws, distinct from simulation realizations
_MC_STREAM = 2 ** 63 + 7


@dataclass(frozen=True)
class SLLCConfig:
    domain: DomainBox
    l: float = 2
    norm: NormSpec = L2
    pairs: PairSamplingConfig = field(default_factory=lambda: PairSamplingConfig(refine=False))
    mc_samples: int = 2000
    h_ladder: tuple = DEFAULT_SLLC_LADDER
    seed: int = 0
    refine_pairs: bool = False

    def __post_init__(self):
        if self.l < 1:
            raise ValueError("moment order l must be at least 1")
        if self.mc_samples < MIN_MC_SAMPLES:
            raise ValueError(f"mc_samples must be at least {MIN_MC_SAMPLES}")
        object.__setattr__(self, "norm", NormSpec.parse(self.norm))
        object.__setattr__(self, "domain", DomainBox.parse(self.domain))
        object.__setattr__(self, "h_ladder", tuple(check_ladder(self.h_ladder, max_ratio=0.5)))

    def describe(self):
        return {"l": self.l, "norm": self.norm.describe(), "domain": self.domain.describe(),
                "pairs": self.pairs.describe(), "mc_samples": self.mc_samples,
                "h_ladder": list(self.h_ladder), "seed": self.seed}


def draws(cfg, d):
    return standard_normals(cfg.seed, _MC_STREAM, 0, cfg.mc_samples, d)


class _PairTerms:
    """Differences of the drift, diffusion and ``L_k G`` terms at pairs."""

    def __init__(self, model, U, V):
        self.delta = U - V
        self.dF = model.drift(U) - model.drift(V)
        self.dG = model.diffusion(U) - model.diffusion(V)
        self.dLG = lg_tensor(model, U) - lg_tensor(model, V)
        for arr in (self.dF, self.dG, self.dLG):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite model values at sampled pairs")


def _quotient_samples(terms, sl, xi, h, l, norm, mode):
    """Antithetic samples of the l-th moment quotient, shape ``(pairs, S)``."""
    delta = terms.delta[sl][:, None, :]
    base = _vector_norm_unchecked(terms.delta[sl], norm)[:, None]
    det = delta + h * terms.dF[sl][:, None, :]
    sh = np.sqrt(h)
    dG = terms.dG[sl]
    dLG = terms.dLG[sl]
    acc = 0.0
    for sign in (1.0, -1.0):
        dW = sign * sh * xi
        dW2 = levy_terms(dW, h, mode)
        if dG.shape[-1] == 1:
            noise = dG[:, None, :, 0] * dW[None, :, :] + dLG[:, None, :, 0, 0] * dW2[None, :, 0, :]
        else:
            noise = (np.einsum("pij,sj->psi", dG, dW) + np.einsum("pijk,sjk->psi", dLG, dW2))
        ratio = _vector_norm_unchecked(det + noise, norm) / base
        acc = acc + (ratio ** l - 1.0) / h
    return 0.5 * acc


def _cell_stats(model, U, V, cfg, xi, mode, chunk_elems=4_000_000):
    """Per-pair, per-rung means and standard errors plus the per-pair
    extrapolated intercept with its exact standard error."""
    h = np.asarray(cfg.h_ladder)
    idx = smallest_rungs(h)
    terms = _PairTerms(model, U, V)
    P = len(U)
    S = len(xi)
    R = len(h)
    mean = np.empty((P, R))
    se = np.empty((P, R))
    icpt = np.empty(P)
    icpt_se = np.empty(P)
    step = max(1, chunk_elems // (S * model.n))
    for start in range(0, P, step):
        sl = slice(start, min(P, start + step))
        q = np.stack([_quotient_samples(terms, sl, xi, hr, cfg.l, cfg.norm, mode) for hr in h], axis=1)
        m = q.mean(axis=2)
        s = q.std(axis=2, ddof=1) / np.sqrt(S)
        mean[sl] = m
        se[sl] = s
        for p in range(q.shape[0]):
            c = _rung_weights(h[idx], s[p, idx])
            z = q[p, idx].T @ c
            icpt[start + p] = z.mean()
            icpt_se[start + p] = z.std(ddof=1) / np.sqrt(S)
    return mean, se, icpt, icpt_se


def _rung_weights(h, se):
    if np.all(se > 0):
        return intercept_weights(h, 1.0 / se ** 2)
    return intercept_weights(h)


def _estimates(model, cfg):
    mode = noise_mode(model)
    if mode == "reject":
        raise UnsupportedNoiseError(
            f"model {model.name!r} has noncommutative d={model.d} noise; not supported")
    if model.n != cfg.domain.n:
        raise ValueError("domain dimension does not match the model")
    xi = draws(cfg, model.d)
    U, V, _ = sample_pairs(cfg.domain, cfg.norm, cfg.pairs)
    mean, se, icpt, icpt_se = _cell_stats(model, U, V, cfg, xi, mode)

    if cfg.refine_pairs and cfg.pairs.refine_top > 0:
        top = np.argsort(-icpt, kind="stable")[: cfg.pairs.refine_top]

        def objective(u, v):
            return float(_cell_stats(model, u[None], v[None], cfg, xi, mode)[2][0])

        extra = refine_pairs(objective, cfg.domain, [(U[i], V[i]) for i in top], cfg.pairs.refine_maxiter)
        if extra:
            Ue = np.array([p[0] for p in extra])
            Ve = np.array([p[1] for p in extra])
            m2, s2, i2, e2 = _cell_stats(model, Ue, Ve, cfg, xi, mode)
            U, V = np.vstack([U, Ue]), np.vstack([V, Ve])
            mean, se = np.vstack([mean, m2]), np.vstack([se, s2])
            icpt, icpt_se = np.concatenate([icpt, i2]), np.concatenate([icpt_se, e2])
    return U, V, mean, se, icpt, icpt_se


def _report(est, se, trace, pair, mode, counts):
    ci = (est - 1.96 * se, est + 1.96 * se)
    inconclusive = (ci[1] - ci[0]) > abs(est)
    return EstimateReport(float(est), ci, trace, pair, None, (LOWER_ESTIMATE,), mode, counts,
                          float(se), bool(inconclusive))


def sllc_reports(model, cfg):
    """Both the s-lub and the lub estimate from one set of pairs and draws."""
    U, V, mean, se, icpt, icpt_se = _estimates(model, cfg)
    h = np.asarray(cfg.h_ladder)
    idx = smallest_rungs(h)
    counts = {"pairs": len(U), "mc_samples": cfg.mc_samples, "rungs": len(h)}

    best = int(np.argmax(icpt))
    trace = [(hr, mean[best, r], se[best, r]) for r, hr in enumerate(h)]
    slub = _report(icpt[best], icpt_se[best], trace, (U[best], V[best]), "slub", counts)

    arg = mean.argmax(axis=0)
    top = mean[arg, np.arange(len(h))]
    top_se = se[arg, np.arange(len(h))]
    c = _rung_weights(h[idx], top_se[idx])
    est = float(top[idx] @ c)
    est_se = float(np.sqrt(np.sum((c * top_se[idx]) ** 2)))
    trace = [(hr, top[r], top_se[r]) for r, hr in enumerate(h)]
    j = int(arg[idx[0]])
    lub = _report(est, est_se, trace, (U[j], V[j]), "lub", counts)
    return slub, lub


def sllc_estimate(model, cfg, mode="slub"):
    """Sampled stochastic logarithmic Lipschitz constant of ``(F, G)``.

    ``mode="slub"`` extrapolates each pair to ``h -> 0`` and then takes the
    max (the ``M+`` ordering); ``mode="lub"`` maximizes over pairs at each
    ``h`` first. The 95% interval belongs to the maximizing pair.
    """
    slub, lub = sllc_reports(model, cfg)
    if mode == "slub":
        return slub
    if mode == "lub":
        return lub
    raise ValueError(f"unknown mode {mode!r}; expected 'slub' or 'lub'")


# ---------------------------------------------------------------------------
# deterministic upper bounds

def _noise_factor(l):
    return l / np.sqrt(2.0 * np.pi)


def prop5_bound_llc(model, cfg, detail=False):
    """Bound from logarithmic Lipschitz constants of the corrected drift and of ``+-G_j``:

        l M+[F - 1/2 sum_j J_{G_j} G_j] + l/sqrt(2 pi) sum_j (M+[G_j] + M+[-G_j])
    """
    pairs = cfg.pairs
    drift = detlip.mplus_estimate(model.corrected_drift_field(), cfg.domain, cfg.norm, pairs).point_estimate
    noise = 0.0
    for j in range(model.d):
        col = model.diffusion_column(j)
        noise += (detlip.mplus_estimate(col, cfg.domain, cfg.norm, pairs).point_estimate
                  + detlip.mplus_estimate(-col, cfg.domain, cfg.norm, pairs).point_estimate)
    value = cfg.l * drift + _noise_factor(cfg.l) * noise
    if detail:
        return {"value": value, "drift_term": cfg.l * drift, "noise_term": _noise_factor(cfg.l) * noise}
    return value


def prop5_bound_measure(model, cfg, grid=41, detail=False):
    """Bound from grid suprema of Jacobian measures:

        l sup mu[J_{F - 1/2 sum_j J_{G_j} G_j}] + l/sqrt(2 pi) sum_j (sup mu[J_{G_j}] + sup mu[-J_{G_j}])
    """
    drift_rep = detlip.sup_jacobian_measure(model.corrected_drift_field(), cfg.domain, cfg.norm, grid)
    noise = 0.0
    for j in range(model.d):
        col = model.diffusion_column(j)
        noise += (detlip.sup_jacobian_measure(col, cfg.domain, cfg.norm, grid).point_estimate
                  + detlip.sup_jacobian_measure(-col, cfg.domain, cfg.norm, grid).point_estimate)
    value = cfg.l * drift_rep.point_estimate + _noise_factor(cfg.l) * noise
    if detail:
        return {"value": value, "drift_term": cfg.l * drift_rep.point_estimate,
                "noise_term": _noise_factor(cfg.l) * noise, "argmax_point": drift_rep.argmax_point}
    return value


def linear_diffusion_bound(model, sigmas, norm=L2, domain=None, grid=41, rtol=1e-10):
    """``sup mu[J_F] - 1/2 sum_j sigma_j^2`` for diffusions ``G_j(x) = sigma_j x``.

    The diffusion is checked against ``sigma_j x`` on the grid; any mismatch
    raises ValueError.
    """
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=float))
    if sigmas.size != model.d:
        raise ValueError(f"expected {model.d} sigmas, got {sigmas.size}")
    if np.any(sigmas < 0):
        raise ValueError("sigmas must be non-negative")
    if domain is None:
        raise ValueError("a domain box is required")
    points = domain.grid(grid)
    G = model.diffusion(points)
    expect = points[:, :, None] * sigmas[None, None, :]
    scale = max(1.0, float(np.abs(expect).max()))
    if not np.allclose(G, expect, rtol=0.0, atol=rtol * scale):
        raise ValueError(f"model {model.name!r} does not have linear diffusion sigma_j * x")
    sup = detlip.sup_jacobian_measure(model.drift_field(), domain, norm, grid).point_estimate
    return sup - 0.5 * float(np.sum(sigmas ** 2))


@dataclass
class AuditReport:
    estimate: EstimateReport
    bound13: float
    bound14: float
    relation: str

    def to_dict(self):
        return {"estimate": self.estimate.point_estimate,
                "ci95": [float(self.estimate.ci95[0]), float(self.estimate.ci95[1])],
                "bound_eq13": float(self.bound13), "bound_eq14": float(self.bound14),
                "relation": self.relation, "estimate_detail": self.estimate.to_dict()}


def classify(ci95, bounds, tol=1e-6):
    lo, hi = ci95
    width = hi - lo
    slack = [tol * max(1.0, abs(b)) for b in bounds]
    if any(lo - b > width + s for b, s in zip(bounds, slack)):
        return "estimate-exceeds-bound"
    if all(hi <= b + s for b, s in zip(bounds, slack)):
        return "consistent"
    return "inconclusive"


def bound_audit(model, cfg, grid=41):
    """Compare the sampled constant against both deterministic bounds.

    The relation is reported, never assumed: ``estimate-exceeds-bound`` when
    the interval's lower edge clears a bound by more than the interval width,
    ``consistent`` when the upper edge is below both bounds, else
    ``inconclusive``.
    """
    est = sllc_estimate(model, cfg)
    b13 = prop5_bound_llc(model, cfg)
    b14 = prop5_bound_measure(model, cfg, grid)
    return AuditReport(est, b13, b14, classify(est.ci95, (b13, b14)))


def half_normal_mean(num_draws=1_000_000, seed=0):
    """Sample mean of ``|xi|`` from the estimator's normal stream (about sqrt(2/pi))."""
    xi = standard_normals(seed, _MC_STREAM, 0, num_draws, 1)
    return float(np.abs(xi).mean())
