"""Command-line front end.

A run is described by a JSON config; ``--seed``, ``--realizations`` and
``--threads`` override it. Every run writes ``summary.json`` plus CSV series
into ``--out``. Exit codes: 0 success, 1 runtime failure, 2 invalid config.
"""

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import detlip, experiments, sde, stochlip
from ._fit import check_ladder
from .models import BUILTIN_NAMES, DomainBox, ModelError, builtin, linear_field
from .norms import NormSpec, matrix_measure

SUBCOMMANDS = ("measure", "llc", "sllc", "bound", "audit", "simulate", "experiment", "scan", "sync",
               "reproduce-vdp")
DEFAULT_SEED = 20240229
DEFAULT_DOMAIN = (-2.0, 2.0)
SEED_MAX = 2 ** 64 - 1

# key -> (kind, default); kinds drive validation
_KEYS = {
    "subcommand": ("str", None),
    "model": ("model", None),
    "matrix": ("matrix", None),
    "norm": ("norm", "L2"),
    "domain": ("domain", None),
    "l": ("pos_real_ge1", 2.0),
    "T": ("pos_real", None),
    "h": ("pos_real", None),
    "realizations": ("pos_int", 1000),
    "grid": ("int_ge2", 41),
    "pairs": ("pairs", None),
    "ladder": ("ladder", None),
    "mc_samples": ("pos_int", 2000),
    "mode": ("mode", "slub"),
    "initials": ("initials", None),
    "record_dt": ("pos_real", 0.05),
    "window": ("window", None),
    "threshold": ("pos_real", 1e-2),
    "sigmas": ("sigmas", None),
    "sigma": ("nonneg_real", 0.35),
    "simulate": ("bool", True),
    "estimate_rate": ("bool", False),
    "seed": ("seed", DEFAULT_SEED),
}

_REQUIRED = {
    "measure": ("matrix",),
    "llc": ("domain",),
    "sllc": ("model", "domain"),
    "bound": ("model", "domain"),
    "audit": ("model", "domain"),
    "simulate": ("model", "initials", "T", "h"),
    "experiment": ("model", "initials", "T", "h"),
    "scan": ("sigmas",),
    "sync": ("model", "initials", "T", "h"),
    "reproduce-vdp": (),
}

_SIM = ("l", "T", "h", "realizations", "initials", "record_dt")
_USED = {
    "measure": ("matrix",),
    "llc": ("matrix", "pairs", "ladder", "mode"),
    "sllc": ("l", "pairs", "ladder", "mc_samples", "mode"),
    "bound": ("l", "grid", "pairs"),
    "audit": ("l", "grid", "pairs", "ladder", "mc_samples"),
    "simulate": _SIM,
    "experiment": _SIM + ("window", "grid", "estimate_rate", "pairs", "ladder", "mc_samples"),
    "scan": _SIM + ("sigmas", "grid", "simulate"),
    "sync": _SIM + ("threshold",),
    "reproduce-vdp": _SIM + ("sigma", "grid"),
}

_DEFAULTS_BY_SUBCOMMAND = {
    "scan": {"T": 50.0, "h": 1e-3, "realizations": 200, "initials": [list(p) for p in experiments.VDP_INITIALS]},
    "reproduce-vdp": {"T": 50.0, "h": 1e-3, "initials": [list(p) for p in experiments.VDP_INITIALS]},
}


@dataclass
class RunConfig:
    """A validated run. ``values`` holds every resolved setting."""

    subcommand: str
    values: dict
    seed: int = DEFAULT_SEED
    output_dir: Path = Path("out")
    threads: int = 1
    model: object = None
    norm: NormSpec = field(default=None)
    domain: DomainBox = None

    def resolved(self):
        """Config echo; excludes settings that must not affect results."""
        out = {k: self.values[k] for k in sorted(_USED[self.subcommand]) if self.values.get(k) is not None}
        out["norm"] = self.norm.describe()
        if self.model is not None:
            out["model"] = self.model.describe()
        if self.domain is not None:
            out["domain"] = self.domain.describe()
        return out


# ---------------------------------------------------------------------------
# validation

def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _check(key, kind, value, errors):
    bad = errors.append
    if kind == "str":
        if not isinstance(value, str):
            bad(f"{key} must be a string")
    elif kind in ("pos_real", "pos_real_ge1", "nonneg_real"):
        if not _is_number(value):
            bad(f"{key} must be a finite number")
        elif kind == "pos_real" and value <= 0:
            bad(f"{key} must be positive")
        elif kind == "pos_real_ge1" and value < 1:
            bad(f"{key} must be at least 1")
        elif kind == "nonneg_real" and value < 0:
            bad(f"{key} must be non-negative")
    elif kind in ("pos_int", "int_ge2"):
        if not isinstance(value, int) or isinstance(value, bool):
            bad(f"{key} must be an integer")
        elif kind == "pos_int" and value < 1:
            bad(f"{key} must be positive")
        elif kind == "int_ge2" and value < 2:
            bad(f"{key} must be at least 2")
    elif kind == "seed":
        if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= SEED_MAX:
            bad(f"{key} must be an integer in [0, 2^64)")
    elif kind == "bool":
        if not isinstance(value, bool):
            bad(f"{key} must be true or false")
    elif kind == "mode":
        if value not in ("slub", "lub"):
            bad(f"{key} must be 'slub' or 'lub'")
    elif kind == "matrix":
        try:
            A = np.array(value, dtype=float)
            ok = A.ndim == 2 and A.shape[0] == A.shape[1] and A.size > 0 and np.all(np.isfinite(A))
        except (TypeError, ValueError):
            ok = False
        if not ok:
            bad(f"{key} must be a finite square matrix")
    elif kind in ("ladder", "sigmas"):
        if not isinstance(value, list) or not value or not all(_is_number(v) and v > 0 for v in value):
            bad(f"{key} must be a non-empty list of positive numbers")
    elif kind == "window":
        if (not isinstance(value, list) or len(value) != 2 or not all(_is_number(v) for v in value)
                or value[0] >= value[1] or value[0] < 0):
            bad(f"{key} must be [t_lo, t_hi] with 0 <= t_lo < t_hi")
    elif kind == "initials":
        try:
            arr = np.array(value, dtype=float)
            ok = arr.ndim == 2 and arr.shape[0] >= 1 and np.all(np.isfinite(arr))
        except (TypeError, ValueError):
            ok = False
        if not ok:
            bad(f"{key} must be a list of finite state vectors of equal length")
    elif kind == "pairs":
        if not isinstance(value, dict):
            bad(f"{key} must be an object")
            return
        allowed = {"num_pairs", "pair_scales", "rng_seed", "structured", "refine", "refine_top"}
        for k in sorted(set(value) - allowed):
            bad(f"unknown key pairs.{k}")
        try:
            detlip.PairSamplingConfig(**{k: v for k, v in value.items() if k in allowed})
        except (TypeError, ValueError) as exc:
            bad(f"pairs: {exc}")


def validate(config_text, subcommand=None):
    """Parse and check a JSON config. Returns ``(RunConfig, [])`` or ``(None, errors)``.

    All problems are collected; nothing is raised.
    """
    errors = []
    try:
        raw = json.loads(config_text) if config_text and config_text.strip() else {}
    except json.JSONDecodeError as exc:
        return None, [f"config is not valid JSON: {exc}"]
    if not isinstance(raw, dict):
        return None, ["config must be a JSON object"]

    sub = subcommand or raw.get("subcommand")
    if sub is None:
        errors.append("no subcommand given")
    elif sub not in SUBCOMMANDS:
        errors.append(f"unknown subcommand {sub!r}; expected one of {', '.join(SUBCOMMANDS)}")
    elif subcommand and raw.get("subcommand") not in (None, subcommand):
        errors.append(f"config subcommand {raw['subcommand']!r} conflicts with {subcommand!r}")

    for key in sorted(set(raw) - set(_KEYS)):
        errors.append(f"unknown key {key!r}")

    values = {k: d for k, (_, d) in _KEYS.items()}
    values.update(_DEFAULTS_BY_SUBCOMMAND.get(sub, {}))
    for key, value in raw.items():
        if key in _KEYS and key not in ("model",):
            _check(key, _KEYS[key][0], value, errors)
            values[key] = value
    if sub in _REQUIRED:
        for key in _REQUIRED[sub]:
            if raw.get(key) is None and values.get(key) is None:
                errors.append(f"{sub} requires {key!r}")
    if sub == "experiment" and raw.get("estimate_rate") and raw.get("domain") is None:
        errors.append("estimate_rate requires 'domain'")
    if sub == "llc" and raw.get("model") is None and raw.get("matrix") is None:
        errors.append("llc requires 'model' or 'matrix'")

    norm = None
    try:
        norm = NormSpec.parse(values["norm"])
    except (TypeError, ValueError) as exc:
        errors.append(f"norm: {exc}")

    model = None
    if raw.get("model") is not None:
        spec = raw["model"]
        if isinstance(spec, str):
            spec = {"name": spec}
        if not isinstance(spec, dict) or not isinstance(spec.get("name"), str):
            errors.append(f"model must be an object with a 'name' (one of {', '.join(BUILTIN_NAMES)})")
        elif not isinstance(spec.get("params", {}), dict):
            errors.append("model params must be an object")
        else:
            for k in sorted(set(spec) - {"name", "params"}):
                errors.append(f"unknown key model.{k}")
            try:
                model = builtin(spec["name"], spec.get("params", {}))
            except (ModelError, TypeError, ValueError) as exc:
                errors.append(str(exc))
        values["model"] = None

    n = model.n if model is not None else None
    if sub == "measure" or (sub == "llc" and model is None):
        try:
            n = np.array(values["matrix"], dtype=float).shape[0]
        except (TypeError, ValueError, IndexError):
            n = None
    if sub in ("scan", "reproduce-vdp"):
        n = 2

    domain = None
    if values["domain"] is not None:
        try:
            domain = DomainBox.parse(values["domain"])
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            errors.append(f"domain: {exc}")
        values["domain"] = None
    elif sub in ("scan", "reproduce-vdp"):
        # the Van der Pol example's own box
        domain = DomainBox.cube(*DEFAULT_DOMAIN, 2)
    if domain is not None and n is not None and domain.n != n:
        errors.append(f"domain has dimension {domain.n}, expected {n}")
    if norm is not None and norm.weight is not None and n is not None and norm.weight.shape[0] != n:
        errors.append(f"norm weight has dimension {norm.weight.shape[0]}, expected {n}")

    if values.get("initials") is not None and n is not None and not any("initials" in e for e in errors):
        arr = np.array(values["initials"], dtype=float)
        if arr.shape[1] != n:
            errors.append(f"initial states must have dimension {n}")
        elif sub in ("experiment",) and arr.shape[0] != 2:
            errors.append("experiment needs exactly two initial states")
        elif sub in ("sync",) and arr.shape[0] < 2:
            errors.append("sync needs at least two initial states")

    if _is_number(values.get("T")) and _is_number(values.get("h")) and values["T"] > 0 and values["h"] > 0:
        try:
            sde.step_count(values["T"], values["h"])
        except ValueError as exc:
            errors.append(str(exc))
    if model is not None and sub in ("simulate", "experiment", "sync", "sllc", "audit"):
        if sde.noise_mode(model) == "reject":
            errors.append(f"model {model.name!r} has noncommutative noise, which is not supported")
    if sub in ("sllc", "audit", "experiment") and values.get("ladder") is not None:
        try:
            check_ladder(values["ladder"], max_ratio=0.5)
        except ValueError as exc:
            errors.append(f"ladder: {exc}")
    if isinstance(values.get("mc_samples"), int) and values["mc_samples"] < stochlip.MIN_MC_SAMPLES:
        errors.append(f"mc_samples must be at least {stochlip.MIN_MC_SAMPLES}")

    if errors:
        return None, errors
    values["subcommand"] = sub
    cfg = RunConfig(sub, values, values["seed"], model=model, norm=norm, domain=domain)
    return cfg, []


# ---------------------------------------------------------------------------
# output

def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _fmt(x):
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def _divergence_rows(series):
    return ([t, m, s, int(c)] for t, m, s, c in series.rows())


DIVERGENCE_HEADER = ["t", "moment", "stderr", "n_realizations"]


def _trajectory_rows(ens):
    R, K, m, _ = ens.states.shape
    for r in range(R):
        for i in range(m):
            for k in range(K):
                yield [int(ens.realizations[r]), i, ens.times[k], *ens.states[r, k, i]]


# ---------------------------------------------------------------------------
# subcommands

def _sllc_config(cfg):
    v = cfg.values
    kw = {"domain": cfg.domain, "l": v["l"], "norm": cfg.norm, "mc_samples": v["mc_samples"], "seed": cfg.seed}
    if v.get("pairs"):
        kw["pairs"] = detlip.PairSamplingConfig(**{"refine": False, **v["pairs"]})
    if v.get("ladder"):
        kw["h_ladder"] = tuple(v["ladder"])
    return stochlip.SLLCConfig(**kw)


def _pairs(cfg):
    p = cfg.values.get("pairs") or {}
    return detlip.PairSamplingConfig(**{"rng_seed": cfg.seed % 2 ** 32, **p})


def _run_measure(cfg, out):
    A = np.array(cfg.values["matrix"], dtype=float)
    return {"mu": float(matrix_measure(A, cfg.norm))}


def _run_llc(cfg, out):
    field_ = cfg.model.drift_field() if cfg.model is not None else linear_field(cfg.values["matrix"])
    kw = {"h_ladder": tuple(cfg.values["ladder"])} if cfg.values.get("ladder") else {}
    rep = detlip.mplus_estimate(field_, cfg.domain, cfg.norm, _pairs(cfg), mode=cfg.values["mode"], **kw)
    write_csv(out / "llc_trace.csv", ["h", "quotient"], ([h, e] for h, e, _ in rep.per_h))
    return rep.to_dict()


def _run_sllc(cfg, out):
    rep = stochlip.sllc_estimate(cfg.model, _sllc_config(cfg), cfg.values["mode"])
    write_csv(out / "sllc_trace.csv", ["h", "estimate", "stderr"], rep.per_h)
    return rep.to_dict()


def _run_bound(cfg, out):
    scfg = stochlip.SLLCConfig(domain=cfg.domain, l=cfg.values["l"], norm=cfg.norm, pairs=_pairs(cfg))
    b14 = stochlip.prop5_bound_measure(cfg.model, scfg, cfg.values["grid"], detail=True)
    b13 = stochlip.prop5_bound_llc(cfg.model, scfg, detail=True)
    return {"bound_eq14": b14["value"], "bound_eq13": b13["value"],
            "eq14_terms": {"drift": b14["drift_term"], "noise": b14["noise_term"],
                           "argmax_point": b14["argmax_point"]},
            "eq13_terms": {"drift": b13["drift_term"], "noise": b13["noise_term"]}}


def _run_audit(cfg, out):
    rep = stochlip.bound_audit(cfg.model, _sllc_config(cfg), cfg.values["grid"])
    return rep.to_dict()


def _ensemble(cfg, initials=None):
    v = cfg.values
    stride = experiments.record_stride(v["T"], v["h"], v["record_dt"])
    init = v["initials"] if initials is None else initials
    return sde.simulate_ensemble(cfg.model, init, v["T"], v["h"], cfg.seed, v["realizations"], stride,
                                 cfg.threads)


def _run_simulate(cfg, out):
    ens = _ensemble(cfg)
    write_csv(out / "trajectories.csv",
              ["realization", "trajectory", "t", *[f"x_{i + 1}" for i in range(cfg.model.n)]],
              _trajectory_rows(ens))
    res = {"realizations": len(ens.realizations), "recorded_times": len(ens.times),
           "blowup_fraction": ens.blowup_fraction,
           "blown_realizations": ens.realizations[ens.blown].tolist(),
           "blowup_steps": ens.blowup_step[ens.blown].tolist()}
    if ens.states.shape[2] >= 2:
        series = sde.moment_divergence(ens.states[:, :, 0], ens.states[:, :, 1], ens.times, cfg.values["l"],
                                       cfg.norm)
        write_csv(out / "divergence.csv", DIVERGENCE_HEADER, _divergence_rows(series))
        res["terminal_moment"] = float(series.moment[-1])
    if ens.blowup_fraction > 0:
        res["failure"] = f"blow-up in {int(ens.blown.sum())} realization(s)"
    return res


def _run_experiment(cfg, out):
    v = cfg.values
    scfg = _sllc_config(cfg) if v["estimate_rate"] else None
    rep = experiments.contraction_experiment(
        cfg.model, v["initials"], v["l"], cfg.norm, v["T"], v["h"], v["realizations"], cfg.seed,
        v["record_dt"], v["window"], cfg.threads, cfg.domain, scfg, v["grid"])
    write_csv(out / "divergence.csv", DIVERGENCE_HEADER, _divergence_rows(rep.divergence))
    res = rep.summary()
    if not rep.valid:
        res["failure"] = rep.notes[0]
    return res


def _run_sync(cfg, out):
    v = cfg.values
    rep = experiments.sync_experiment(cfg.model, v["initials"], v["l"], cfg.norm, v["T"], v["h"],
                                      v["realizations"], cfg.seed, v["record_dt"], v["threshold"], cfg.threads)
    rows = []
    for (i, j), s in rep.pairwise.items():
        rows.extend([t, i, j, m, se, int(c)] for t, m, se, c in s.rows())
    write_csv(out / "sync.csv", ["t", "i", "j", "moment", "stderr", "n_realizations"], rows)
    res = {"verdicts": rep.verdicts, "max_pairwise_rate": rep.fitted_rate, "blowup_fraction": rep.blowup_fraction,
           "terminal_ratio": {f"{i}-{j}": (s.moment[-1] / s.moment[0] if s.moment[0] > 0 else 0.0)
                              for (i, j), s in rep.pairwise.items()}}
    if not rep.valid:
        res["failure"] = "blow-up fraction above 1%"
    return res


def _run_scan(cfg, out):
    v = cfg.values
    rows = experiments.sigma_threshold_scan(
        v["sigmas"], v["l"], cfg.norm, cfg.domain, v["grid"], v["simulate"], v["T"], v["h"],
        v["realizations"], cfg.seed, v["initials"], v["record_dt"], cfg.threads)
    cols = ["sigma", "bound14", "fitted_rate", "pathwise_rate"]
    write_csv(out / "scan.csv", cols, ([r[c] for c in cols] for r in rows))
    return {"rows": rows, "threshold_sigma": 1.0 / math.sqrt(8.0)}


def _run_vdp(cfg, out):
    v = cfg.values
    rep = experiments.reproduce_vdp(v["sigma"], v["T"], v["h"], v["realizations"], cfg.seed, v["initials"],
                                    v["record_dt"], cfg.threads, v["l"], cfg.norm, v["grid"])
    write_csv(out / "divergence.csv", DIVERGENCE_HEADER, _divergence_rows(rep.divergence))
    path_rows = []
    for panel, states in rep.sample_paths.items():
        for i in range(states.shape[1]):
            path_rows.extend([panel, i, t, *states[k, i]] for k, t in enumerate(rep.times))
    write_csv(out / "sample_paths.csv", ["panel", "trajectory", "t", "x_1", "x_2"], path_rows)
    ratio_rows = []
    for panel, ratios in rep.terminal_ratios.items():
        ratio_rows.extend([panel, r, x] for r, x in enumerate(ratios))
    write_csv(out / "terminal_ratios.csv", ["panel", "realization", "ratio"], ratio_rows)
    res = {"checks": rep.checks, "details": rep.details}
    if not rep.checks["valid"]:
        res["failure"] = "blow-up fraction above 1%"
    return res


_RUNNERS = {
    "measure": _run_measure, "llc": _run_llc, "sllc": _run_sllc, "bound": _run_bound, "audit": _run_audit,
    "simulate": _run_simulate, "experiment": _run_experiment, "scan": _run_scan, "sync": _run_sync,
    "reproduce-vdp": _run_vdp,
}


def run(cfg, record_timings=False):
    """Execute a validated config; returns the exit status."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        results = _RUNNERS[cfg.subcommand](cfg, out)
    except (sde.BlowUpError, FloatingPointError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - start
    summary = {"subcommand": cfg.subcommand, "config": cfg.resolved(), "seed": cfg.seed, "results": results,
               "timings": {"wall_seconds": elapsed} if record_timings else None}
    text = json.dumps(_clean(summary), indent=2, sort_keys=True, allow_nan=False) + "\n"
    (out / "summary.json").write_text(text)
    if isinstance(results, dict) and results.get("failure"):
        print(f"error: {results['failure']}", file=sys.stderr)
        return 1
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="stochcontract",
                                description="Contraction analysis of ODEs and Ito SDEs.")
    p.add_argument("subcommand", nargs="?", help=", ".join(SUBCOMMANDS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help=f"master seed (default {DEFAULT_SEED})")
    p.add_argument("--out", default="out", help="output directory (default ./out)")
    p.add_argument("--realizations", type=int, help="override the realization count")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    p.add_argument("--timings", action="store_true", help="record wall time in the summary")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return 2
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError:
        raw = None
    if isinstance(raw, dict):
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.realizations is not None:
            raw["realizations"] = args.realizations
        text = json.dumps(raw)
    cfg, errors = validate(text, args.subcommand)
    if args.threads is not None and args.threads < 1:
        errors.append("threads must be positive")
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    cfg.output_dir = Path(args.out)
    cfg.threads = args.threads
    return run(cfg, args.timings)


if __name__ == "__main__":
    sys.exit(main())
