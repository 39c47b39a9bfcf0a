"""Experiment drivers: moment decay, Van der Pol reproduction, sigma scans
and common-noise synchronization of uncoupled copies."""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import sde, stochlip
from ._fit import log_slope
from .models import DomainBox, builtin
from .norms import L2, NormSpec
from .sde import DivergenceSeries, moment_divergence, separations, simulate_ensemble

MIN_FIT_POINTS = 10
MAX_BLOWUP_FRACTION = 0.01
VDP_INITIALS = ((1.0, -1.0), (2.0, -2.0))


class NonPositiveSeriesError(ValueError):
    def __init__(self, index, t):
        super().__init__(f"series is not positive at t={t:g} (index {index})")
        self.index = index
        self.t = t


def decay_rate_fit(times, values, window=None):
    """Slope of ``log(values)`` against time on ``window = (t_lo, t_hi)``."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if window is None:
        window = (times[0], times[-1])
    sel = (times >= window[0] - 1e-12) & (times <= window[1] + 1e-12)
    t, v = times[sel], values[sel]
    if t.size < MIN_FIT_POINTS:
        raise ValueError(f"need at least {MIN_FIT_POINTS} points in the fit window, got {t.size}")
    bad = np.flatnonzero(~(v > 0))
    if bad.size:
        raise NonPositiveSeriesError(int(np.flatnonzero(sel)[bad[0]]), float(t[bad[0]]))
    return log_slope(t, v)


def fit_with_shrink(times, values, window):
    """``decay_rate_fit``, shrinking the window to end before the series touches zero.

    Returns ``(rate, window, note)``; the rate is NaN when no usable window remains.
    """
    try:
        return decay_rate_fit(times, values, window), window, None
    except NonPositiveSeriesError as exc:
        zero = exc
    except ValueError as exc:
        return float("nan"), window, str(exc)
    note = f"series touched zero at t={zero.t:g}; fit window shrunk"
    new = (window[0], float(times[zero.index - 1])) if zero.index > 0 else None
    if new is None or new[1] <= new[0]:
        return float("nan"), window, note + " to nothing"
    try:
        return decay_rate_fit(times, values, new), new, note
    except ValueError as exc:
        return float("nan"), new, f"{note}; {exc}"


def pathwise_rate(times, sep, window):
    """Median over realizations of the per-path slope of ``log|X - Y|``."""
    times = np.asarray(times, dtype=float)
    sel = (times >= window[0] - 1e-12) & (times <= window[1] + 1e-12)
    slopes = []
    for row in np.asarray(sep)[:, sel]:
        ok = np.isfinite(row) & (row > 0)
        if ok.sum() >= 2:
            slopes.append(log_slope(times[sel][ok], row[ok]))
    return float(np.median(slopes)) if slopes else float("nan")


def is_decreasing(times, values, t_lo, t_hi, stderr=None):
    """Trend test for a noisy Monte Carlo series on ``[t_lo, t_hi]``.

    True when the log-slope is negative and no value rises above any
    earlier one by more than two standard errors of their difference.
    Without ``stderr`` the series must be non-increasing.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    sel = (times >= t_lo - 1e-12) & (times <= t_hi + 1e-12)
    t, v = times[sel], values[sel]
    se = np.zeros_like(v) if stderr is None else np.asarray(stderr, dtype=float)[sel]
    if t.size < 2 or not np.all(np.isfinite(v)):
        return False
    pos = v > 0
    if pos.sum() >= 2 and log_slope(t[pos], v[pos]) >= 0:
        return False
    # pairwise s < t, one row at a time to bound memory
    for i in range(v.size - 1):
        if np.any(v[i + 1:] - v[i] > 2 * np.hypot(se[i + 1:], se[i])):
            return False
    return True


def record_stride(T, h, record_dt):
    """Largest stride not above ``record_dt / h`` that divides the step count."""
    steps = sde.step_count(T, h)
    target = max(1, int(round(record_dt / h))) if record_dt else 1
    for k in range(min(target, steps), 0, -1):
        if steps % k == 0:
            return k
    return 1


@dataclass
class ExperimentReport:
    divergence: DivergenceSeries | None
    fitted_rate: float
    pathwise_rate: float
    bound_rate: float | None = None
    sllc: object = None
    verdicts: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    blowup_fraction: float = 0.0
    pairwise: dict = field(default_factory=dict)
    fit_window: tuple = ()

    @property
    def valid(self):
        return self.blowup_fraction <= MAX_BLOWUP_FRACTION

    def summary(self):
        out = {
            "fitted_rate": self.fitted_rate,
            "pathwise_rate": self.pathwise_rate,
            "bound_rate": self.bound_rate,
            "fit_window": list(self.fit_window),
            "blowup_fraction": self.blowup_fraction,
            "valid": self.valid,
            "verdicts": self.verdicts,
            "notes": self.notes,
        }
        if self.sllc is not None:
            out["sllc"] = self.sllc.to_dict()
        if self.divergence is not None:
            out["initial_moment"] = float(self.divergence.moment[0])
            out["terminal_moment"] = float(self.divergence.moment[-1])
        return out


def _bound_config(model, l, norm, domain):
    return stochlip.SLLCConfig(domain=domain, l=l, norm=norm)


def contraction_experiment(model, initial_pair, l=2, norm=L2, T=10.0, h=1e-3, realizations=1000,
                           seed=0, record_dt=0.05, window=None, threads=1, domain=None,
                           sllc_cfg=None, grid=41):
    """Simulate common-noise pairs and compare their moment decay with the rates.

    With a ``domain`` the grid bound is evaluated; with an ``sllc_cfg`` the
    sampled constant ``r`` is estimated and the series is checked against
    ``E|X(0)-Y(0)|^l exp(r t)`` within two standard errors of the
    difference.
    """
    norm = NormSpec.parse(norm)
    x0, y0 = (np.asarray(p, dtype=float) for p in initial_pair)
    stride = record_stride(T, h, record_dt)
    ens = simulate_ensemble(model, [x0, y0], T, h, seed, realizations, stride, threads)
    return _pair_report(model, ens, 0, 1, l, norm, T, window, domain, sllc_cfg, grid)


def _pair_report(model, ens, i, j, l, norm, T, window, domain, sllc_cfg, grid):
    X = ens.states[:, :, i]
    Y = ens.states[:, :, j]
    series = moment_divergence(X, Y, ens.times, l, norm)
    window = tuple(window) if window else (0.1 * T, 0.6 * T)
    rep = ExperimentReport(series, float("nan"), float("nan"), seed=ens.seed,
                           blowup_fraction=ens.blowup_fraction)
    if not rep.valid:
        rep.notes.append(f"blow-up in {ens.blowup_fraction:.1%} of realizations; experiment invalid")
    if series.moment[0] > 0:
        rep.fitted_rate, rep.fit_window, note = fit_with_shrink(series.times, series.moment, window)
        if note:
            rep.notes.append(note)
        rep.pathwise_rate = pathwise_rate(ens.times, separations(X, Y, norm), rep.fit_window)
    else:
        rep.fit_window = window
        rep.notes.append("initial separation is zero; rates undefined")

    r = None
    if domain is not None:
        rep.bound_rate = float(stochlip.prop5_bound_measure(model, _bound_config(model, l, norm, domain), grid))
    if sllc_cfg is not None:
        rep.sllc = stochlip.sllc_estimate(model, sllc_cfg)
        r = rep.sllc.point_estimate
    predicted = r if r is not None else rep.bound_rate
    m0 = series.moment[0]
    v = rep.verdicts
    v["converges"] = bool(m0 > 0 and series.moment[-1] < 1e-2 * m0)
    if predicted is not None and predicted < 0 and m0 > 0:
        v["monotone_decay"] = is_decreasing(series.times, series.moment, rep.fit_window[0], T, series.stderr)
    else:
        v["monotone_decay"] = None
    if r is not None:
        envelope = m0 * np.exp(r * series.times)
        # both the series and r are Monte Carlo estimates; r enters by the delta method
        se = np.hypot(series.stderr, envelope * series.times * rep.sllc.stderr)
        v["below_rate_envelope"] = bool(np.all(series.moment <= envelope + 2 * se))
    else:
        v["below_rate_envelope"] = None
    v["valid"] = rep.valid
    return rep


def sync_experiment(model, initials, l=2, norm=L2, T=50.0, h=1e-3, realizations=1000, seed=0,
                    record_dt=0.05, threshold=1e-2, threads=1):
    """Uncoupled copies driven by one shared Wiener stream per realization.

    Synchronized when every pairwise ``E|X_i - X_j|^l`` ends below
    ``threshold`` times its initial value (pairs starting together must stay
    together).
    """
    norm = NormSpec.parse(norm)
    initials = np.atleast_2d(np.asarray(initials, dtype=float))
    if len(initials) < 2:
        raise ValueError("need at least two systems")
    stride = record_stride(T, h, record_dt)
    ens = simulate_ensemble(model, initials, T, h, seed, realizations, stride, threads)
    pairwise = {}
    synced = True
    for i, j in combinations(range(len(initials)), 2):
        s = moment_divergence(ens.states[:, :, i], ens.states[:, :, j], ens.times, l, norm)
        pairwise[(i, j)] = s
        m0 = s.moment[0]
        ok = s.moment[-1] < threshold * m0 if m0 > 0 else s.moment[-1] == 0
        synced &= bool(ok)
    rep = ExperimentReport(None, float("nan"), float("nan"), seed=seed,
                           blowup_fraction=ens.blowup_fraction, pairwise=pairwise)
    rates = []
    for (i, j), s in pairwise.items():
        if s.moment[0] > 0:
            rate, _, _ = fit_with_shrink(s.times, s.moment, (0.1 * T, 0.6 * T))
            rates.append(rate)
    rep.fitted_rate = float(np.max(rates)) if rates else float("nan")
    rep.fit_window = (0.1 * T, 0.6 * T)
    rep.verdicts = {"synchronized": synced and rep.valid, "valid": rep.valid}
    return rep


def sigma_threshold_scan(sigmas, l=2, norm=L2, domain=None, grid=41, simulate=True, T=50.0, h=1e-3,
                         realizations=200, seed=0, initials=VDP_INITIALS, record_dt=0.05, threads=1):
    """Per ``sigma``: grid bound for the multiplicative Van der Pol model and,
    optionally, the empirical moment and pathwise rates."""
    if domain is None:
        domain = DomainBox.cube(-2.0, 2.0, 2)
    rows = []
    for sigma in sigmas:
        if sigma <= 0:
            raise ValueError("sigma values must be positive")
        model = builtin("vanderpol-multiplicative", {"sigma": float(sigma)})
        bound = stochlip.prop5_bound_measure(model, _bound_config(model, l, norm, domain), grid)
        row = {"sigma": float(sigma), "bound14": float(bound),
               "fitted_rate": float("nan"), "pathwise_rate": float("nan")}
        if simulate:
            rep = contraction_experiment(model, initials, l, norm, T, h, realizations, seed, record_dt,
                                         threads=threads)
            row["fitted_rate"] = rep.fitted_rate
            row["pathwise_rate"] = rep.pathwise_rate
        rows.append(row)
    return rows


@dataclass
class VdpReproduction:
    """Noisy Van der Pol reproduction: sample paths, terminal ratios, divergence and checks."""

    times: np.ndarray
    sample_paths: dict
    terminal_ratios: dict
    divergence: DivergenceSeries
    bound14: float
    checks: dict
    details: dict


def reproduce_vdp(sigma=0.35, T=50.0, h=1e-3, realizations=1000, seed=0, initials=VDP_INITIALS,
                  record_dt=0.05, threads=1, l=2, norm=L2, grid=41):
    norm = NormSpec.parse(norm)
    stride = record_stride(T, h, record_dt)
    models_ = {
        "a": builtin("vanderpol-deterministic"),
        "b": builtin("vanderpol-additive", {"sigma": sigma}),
        "c": builtin("vanderpol-multiplicative", {"sigma": sigma}),
    }
    runs = {
        "a": simulate_ensemble(models_["a"], initials, T, h, seed, 1, stride, threads),
        "b": simulate_ensemble(models_["b"], initials, T, h, seed, realizations, stride, threads),
        "c": simulate_ensemble(models_["c"], initials, T, h, seed, realizations, stride, threads),
    }
    ratios = {}
    paths = {}
    for key, ens in runs.items():
        sep = separations(ens.states[:, :, 0], ens.states[:, :, 1], norm)
        ratios[key] = sep[:, -1] / sep[:, 0]
        paths[key] = ens.states[0]
    times = runs["a"].times
    div = moment_divergence(runs["c"].states[:, :, 0], runs["c"].states[:, :, 1], times, l, norm)
    cfg = stochlip.SLLCConfig(domain=DomainBox.cube(-2.0, 2.0, 2), l=l, norm=norm)
    bound = float(stochlip.prop5_bound_measure(models_["c"], cfg, grid))

    frac_c = float(np.mean(ratios["c"] < 1e-2))
    checks = {
        "a_no_convergence": bool(ratios["a"][0] > 0.1),
        "b_no_convergence_median": bool(np.nanmedian(ratios["b"]) > 0.1),
        "c_converged_fraction_ge_0.9": bool(frac_c >= 0.9),
        "d_decreasing_5_to_T": is_decreasing(times, div.moment, min(5.0, T), T, div.stderr),
        "d_terminal_below_1e-2_initial": bool(div.moment[-1] < 1e-2 * div.moment[0]),
        "valid": bool(max(runs["b"].blowup_fraction, runs["c"].blowup_fraction) <= MAX_BLOWUP_FRACTION),
    }
    details = {
        "a_terminal_ratio": float(ratios["a"][0]),
        "b_median_terminal_ratio": float(np.nanmedian(ratios["b"])),
        "c_converged_fraction": frac_c,
        "c_median_terminal_ratio": float(np.nanmedian(ratios["c"])),
        "d_nonincreasing_ignoring_se": is_decreasing(times, div.moment, min(5.0, T), T),
        "d_initial_moment": float(div.moment[0]),
        "d_terminal_moment": float(div.moment[-1]),
        "blowup_fraction": {k: runs[k].blowup_fraction for k in runs},
        "bound14": bound,
    }
    return VdpReproduction(times, paths, ratios, div, bound, checks, details)
