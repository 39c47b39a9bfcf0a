"""Drift fields, diffusion maps and the built-in systems.

Every evaluator is vectorized over leading axes: a state batch of shape
``(..., n)`` maps to a drift of shape ``(..., n)`` and a diffusion of shape
``(..., n, d)`` whose column ``j`` is ``G_j``. Diffusion Jacobians are stacked
as ``(..., d, n, n)`` with ``[..., j, :, :] = J_{G_j}``.

Column indices are zero-based throughout.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

FD_EPS = np.finfo(float).eps ** (1.0 / 3.0)


class ModelError(ValueError):
    """Invalid model name or parameters."""


class JacobianError(RuntimeError):
    """A finite-difference Jacobian could not be evaluated."""


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned box ``[lo_i, hi_i]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo >= hi):
            raise ValueError("box needs lo < hi in every coordinate")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, lo, hi, n):
        return cls(np.full(n, float(lo)), np.full(n, float(hi)))

    @classmethod
    def parse(cls, spec):
        if isinstance(spec, cls):
            return spec
        if isinstance(spec, dict):
            return cls(spec["lo"], spec["hi"])
        # list of [lo, hi] intervals
        arr = np.asarray(spec, dtype=float)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def n(self):
        return self.lo.size

    @property
    def diameter(self):
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def sample(self, rng, size):
        return self.lo + (self.hi - self.lo) * rng.random((size, self.n))

    def grid(self, resolution):
        """All points of a regular grid with ``resolution`` nodes per axis."""
        res = np.broadcast_to(np.asarray(resolution, dtype=int), (self.n,))
        if np.any(res < 2):
            raise ValueError("grid resolution must be at least 2 per axis")
        axes = [np.linspace(l, h, r) for l, h, r in zip(self.lo, self.hi, res)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def describe(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


def fd_jacobian(func, x, eps=FD_EPS):
    """Central-difference Jacobian of ``func`` at a batch of points.

    ``func`` maps ``(..., n)`` to ``(..., *out)``; the result has shape
    ``(..., *out, n)``. The step for coordinate ``i`` is
    ``eps * max(1, |x_i|)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    cols = []
    for i in range(n):
        step = eps * np.maximum(1.0, np.abs(x[..., i]))
        xp = x.copy()
        xm = x.copy()
        xp[..., i] += step
        xm[..., i] -= step
        actual = xp[..., i] - xm[..., i]
        try:
            fp = np.asarray(func(xp), dtype=float)
            fm = np.asarray(func(xm), dtype=float)
        except Exception as exc:
            raise JacobianError(f"evaluation failed when perturbing coordinate {i}: {exc}") from exc
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise JacobianError(f"non-finite values when perturbing coordinate {i}")
        extra = fp.ndim - actual.ndim
        cols.append((fp - fm) / actual.reshape(actual.shape + (1,) * extra))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class VectorField:
    """A map ``R^n -> R^n`` with an optional analytic Jacobian."""

    func: Callable
    n: int
    jacobian_func: Callable | None = None
    name: str = "field"

    def __call__(self, x):
        return self.func(np.asarray(x, dtype=float))

    def jacobian(self, x, force_fd=False):
        x = np.asarray(x, dtype=float)
        if self.jacobian_func is not None and not force_fd:
            return self.jacobian_func(x)
        return fd_jacobian(self.func, x)

    def scaled(self, alpha):
        alpha = float(alpha)
        jac = None
        if self.jacobian_func is not None:
            jac = lambda x, f=self.jacobian_func: alpha * f(x)
        return VectorField(lambda x, f=self.func: alpha * f(x), self.n, jac, f"{alpha:g}*{self.name}")

    def __neg__(self):
        return self.scaled(-1.0)

    def __add__(self, other):
        if other.n != self.n:
            raise ValueError("cannot add fields of different dimension")
        jac = None
        if self.jacobian_func is not None and other.jacobian_func is not None:
            jac = lambda x, a=self.jacobian_func, b=other.jacobian_func: a(x) + b(x)
        return VectorField(lambda x, a=self.func, b=other.func: a(x) + b(x), self.n, jac,
                           f"({self.name}+{other.name})")


def linear_field(A, name="linear"):
    A = np.array(A, dtype=float)
    return VectorField(lambda x: x @ A.T, A.shape[0],
                       lambda x: np.broadcast_to(A, np.shape(x)[:-1] + A.shape).copy(), name)


@dataclass(frozen=True)
class SystemModel:
    """An autonomous Ito SDE ``dX = F(X) dt + G(X) dW``."""

    name: str
    n: int
    d: int
    drift: Callable
    diffusion: Callable
    drift_jacobian: Callable | None = None
    diffusion_jacobian: Callable | None = None
    commutative: bool | None = None
    params: dict = field(default_factory=dict)
    lg_func: Callable | None = None

    @property
    def noise_commutes(self):
        return self.d == 1 or bool(self.commutative)

    def drift_field(self):
        return VectorField(self.drift, self.n, self.drift_jacobian, f"{self.name}.F")

    def diffusion_column(self, j):
        """Column ``G_j`` as a vector field."""
        _check_column(self, j)
        jac = None
        if self.diffusion_jacobian is not None:
            jac = lambda x, J=self.diffusion_jacobian: J(x)[..., j, :, :]
        return VectorField(lambda x, G=self.diffusion: G(x)[..., :, j], self.n, jac, f"{self.name}.G{j}")

    def corrected_drift_field(self):
        """``F - 1/2 sum_j J_{G_j} G_j``; its Jacobian is always finite-differenced."""
        return VectorField(lambda x: corrected_drift(self, x), self.n, None, f"{self.name}.Fc")

    def describe(self):
        return {"name": self.name, "params": _jsonable(self.params)}


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _check_column(model, j):
    if not (0 <= j < model.d):
        raise IndexError(f"diffusion column {j} out of range for d={model.d}")


def jacobian(model, which, x, force_fd=False):
    """Jacobian of the drift or of diffusion column(s) at ``x``.

    ``which`` is ``"drift"``, an integer column index ``j`` (returns
    ``J_{G_j}``, shape ``(..., n, n)``) or ``"diffusion"`` (all columns,
    shape ``(..., d, n, n)``). Analytic Jacobians are used when the model
    provides them unless ``force_fd`` is set.
    """
    x = np.asarray(x, dtype=float)
    if which == "drift":
        if model.drift_jacobian is not None and not force_fd:
            return model.drift_jacobian(x)
        return fd_jacobian(model.drift, x)
    if model.diffusion_jacobian is not None and not force_fd:
        JG = model.diffusion_jacobian(x)
    else:
        # (..., n, d, n) -> (..., d, n, n)
        JG = np.moveaxis(fd_jacobian(model.diffusion, x), -2, -3)
    if which == "diffusion":
        return JG
    j = int(which)
    _check_column(model, j)
    return JG[..., j, :, :]


def lg_tensor(model, x, force_fd=False):
    """``L_k G_{ij}`` for all ``i, j, k`` as an array ``(..., n, d, d)``.

    ``L_k G_{ij} = sum_l G_{lk} dG_{ij}/dx_l``, i.e. ``(J_{G_j} G_k)_i``.
    """
    x = np.asarray(x, dtype=float)
    if model.lg_func is not None and not force_fd:
        return model.lg_func(x)
    G = model.diffusion(x)
    JG = jacobian(model, "diffusion", x, force_fd=force_fd)
    return np.einsum("...jil,...lk->...ijk", JG, G)


def lk_apply(model, x, k, force_fd=False):
    """``L_k`` applied to every diffusion entry: an ``(..., n, d)`` array."""
    _check_column(model, k)
    return lg_tensor(model, x, force_fd=force_fd)[..., k]


def corrected_drift(model, x, force_fd=False):
    """``F(x) - 1/2 sum_j J_{G_j}(x) G_j(x)``."""
    x = np.asarray(x, dtype=float)
    LG = lg_tensor(model, x, force_fd=force_fd)
    return model.drift(x) - 0.5 * np.trace(LG, axis1=-2, axis2=-1)


# ---------------------------------------------------------------------------
# transforms

def scaled(model, alpha):
    """The model with drift ``alpha F`` and diffusion ``sqrt(alpha) G``."""
    alpha = float(alpha)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    r = np.sqrt(alpha)
    dj = model.drift_jacobian
    gj = model.diffusion_jacobian
    lg = model.lg_func
    return SystemModel(
        name=f"{model.name}*{alpha:g}", n=model.n, d=model.d,
        drift=lambda x, f=model.drift: alpha * f(x),
        diffusion=lambda x, g=model.diffusion: r * g(x),
        drift_jacobian=None if dj is None else (lambda x: alpha * dj(x)),
        diffusion_jacobian=None if gj is None else (lambda x: r * gj(x)),
        commutative=model.commutative,
        params={**model.params, "scale": alpha},
        lg_func=None if lg is None else (lambda x: alpha * lg(x)),
    )


def without_noise(model):
    """Same drift, ``G = 0`` (same Wiener dimension)."""
    n, d = model.n, model.d
    return SystemModel(
        name=f"{model.name}[G=0]", n=n, d=d,
        drift=model.drift,
        diffusion=lambda x: np.zeros(np.shape(x)[:-1] + (n, d)),
        drift_jacobian=model.drift_jacobian,
        diffusion_jacobian=lambda x: np.zeros(np.shape(x)[:-1] + (d, n, n)),
        commutative=True,
        params={**model.params, "noise": "zero"},
        lg_func=lambda x: np.zeros(np.shape(x)[:-1] + (n, d, d)),
    )


def from_functions(name, n, d, drift, diffusion, drift_jacobian=None, diffusion_jacobian=None,
                   commutative=None, params=None):
    """Wrap user evaluators; missing Jacobians fall back to finite differences."""
    return SystemModel(name, n, d, drift, diffusion, drift_jacobian, diffusion_jacobian,
                       commutative, dict(params or {}))


# ---------------------------------------------------------------------------
# built-in systems

def _vdp_drift(X):
    x, y = X[..., 0], X[..., 1]
    return np.stack([x - x ** 3 / 3.0 - y, x], axis=-1)


def _vdp_jacobian(X):
    x = X[..., 0]
    J = np.zeros(X.shape[:-1] + (2, 2))
    J[..., 0, 0] = 1.0 - x ** 2
    J[..., 0, 1] = -1.0
    J[..., 1, 0] = 1.0
    return J


def _require(params, key, name):
    if key not in params or params[key] is None:
        raise ModelError(f"model {name!r} requires parameter {key!r}")
    return params[key]


def _sigma(params, name):
    s = _require(params, "sigma", name)
    try:
        s = float(s)
    except (TypeError, ValueError):
        raise ModelError(f"sigma must be a number, got {s!r}") from None
    if not np.isfinite(s) or s < 0:
        raise ModelError(f"sigma must be finite and non-negative, got {s}")
    return s


def _vanderpol(name, params):
    if name == "vanderpol-deterministic":
        sigma = 0.0
        params = {}
    else:
        sigma = _sigma(params, name)
        params = {"sigma": sigma}

    if name == "vanderpol-multiplicative":
        def diffusion(X):
            return sigma * (1.0 + 4.0 * X)[..., None]

        def diffusion_jacobian(X):
            J = np.zeros(X.shape[:-1] + (1, 2, 2))
            J[..., 0, 0, 0] = 4.0 * sigma
            J[..., 0, 1, 1] = 4.0 * sigma
            return J

        def lg(X):
            # J_G = 4 sigma I, so L_1 G = 4 sigma G
            return (4.0 * sigma * sigma) * (1.0 + 4.0 * X)[..., None, None]
    else:
        def diffusion(X):
            return np.broadcast_to(np.array([[sigma], [sigma]]), X.shape[:-1] + (2, 1)).copy()

        def diffusion_jacobian(X):
            return np.zeros(X.shape[:-1] + (1, 2, 2))

        def lg(X):
            return np.zeros(X.shape[:-1] + (2, 1, 1))

    return SystemModel(name, 2, 1, _vdp_drift, diffusion, _vdp_jacobian, diffusion_jacobian,
                       commutative=True, params=params, lg_func=lg)


def _linear(name, params):
    A = np.array(_require(params, "A", name), dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or not np.all(np.isfinite(A)):
        raise ModelError("A must be a finite square matrix")
    n = A.shape[0]
    if params.get("B") is not None:
        B = np.array(params["B"], dtype=float)
        if B.ndim == 2:
            B = B[None]
    elif params.get("sigma") is not None:
        sig = np.atleast_1d(np.asarray(params["sigma"], dtype=float))
        if np.any(sig < 0) or not np.all(np.isfinite(sig)):
            raise ModelError("sigma entries must be finite and non-negative")
        B = sig[:, None, None] * np.eye(n)
    else:
        raise ModelError(f"model {name!r} requires parameter 'B' (or 'sigma')")
    if B.ndim != 3 or B.shape[1:] != (n, n) or not np.all(np.isfinite(B)):
        raise ModelError(f"B must be a list of finite {n}x{n} matrices")
    d = B.shape[0]
    commutes = all(np.allclose(B[j] @ B[k], B[k] @ B[j]) for j in range(d) for k in range(j + 1, d))

    def drift(x):
        return x @ A.T

    def diffusion(x):
        # G[..., i, j] = (B_j x)_i
        return np.einsum("jil,...l->...ij", B, x)

    def drift_jacobian(x):
        return np.broadcast_to(A, np.shape(x)[:-1] + (n, n)).copy()

    def diffusion_jacobian(x):
        return np.broadcast_to(B, np.shape(x)[:-1] + (d, n, n)).copy()

    BB = np.einsum("jil,klm->ijkm", B, B)

    def lg(x):
        # L_k G_ij = (B_j B_k x)_i
        return np.einsum("ijkm,...m->...ijk", BB, x)

    echo = {"A": A.tolist(), "B": B.tolist()}
    if params.get("sigma") is not None and params.get("B") is None:
        echo["sigma"] = np.atleast_1d(np.asarray(params["sigma"], dtype=float)).tolist()
    return SystemModel(name, n, d, drift, diffusion, drift_jacobian, diffusion_jacobian,
                       commutative=commutes, params=echo, lg_func=lg)


def _scalar_linear(name, params):
    a = _require(params, "a", name)
    try:
        a = float(a)
    except (TypeError, ValueError):
        raise ModelError(f"a must be a number, got {a!r}") from None
    if not np.isfinite(a):
        raise ModelError("a must be finite")
    sigma = _sigma(params, name)

    return SystemModel(
        name, 1, 1,
        drift=lambda x: a * x,
        diffusion=lambda x: sigma * x[..., None],
        drift_jacobian=lambda x: np.full(np.shape(x)[:-1] + (1, 1), a),
        diffusion_jacobian=lambda x: np.full(np.shape(x)[:-1] + (1, 1, 1), sigma),
        commutative=True,
        params={"a": a, "sigma": sigma},
        lg_func=lambda x: (sigma * sigma) * x[..., None, None],
    )


_BUILDERS = {
    "vanderpol-multiplicative": _vanderpol,
    "vanderpol-additive": _vanderpol,
    "vanderpol-deterministic": _vanderpol,
    "linear": _linear,
    "scalar-linear": _scalar_linear,
}

BUILTIN_NAMES = tuple(_BUILDERS)


def builtin(name, params=None):
    """Construct a built-in model by name."""
    try:
        build = _BUILDERS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; choose from {', '.join(BUILTIN_NAMES)}") from None
    return build(name, dict(params or {}))


# ---------------------------------------------------------------------------
# diagnostics

def jacobian_discrepancy(model, points):
    """Largest relative gap between analytic and finite-difference Jacobians.

    Relative error is ``max|J_a - J_fd| / max(1, max|J_a|)`` per point,
    maximized over points and over drift and diffusion columns.
    """
    points = np.asarray(points, dtype=float)
    worst = 0.0
    pairs = []
    if model.drift_jacobian is not None:
        pairs.append((jacobian(model, "drift", points), jacobian(model, "drift", points, force_fd=True)))
    if model.diffusion_jacobian is not None:
        pairs.append((jacobian(model, "diffusion", points), jacobian(model, "diffusion", points, force_fd=True)))
    for Ja, Jf in pairs:
        axes = tuple(range(points.ndim - 1, Ja.ndim))
        scale = np.maximum(1.0, np.abs(Ja).max(axis=axes))
        worst = max(worst, float(np.max(np.abs(Ja - Jf).max(axis=axes) / scale)))
    return worst


def lipschitz_ratio(field_, domain, num_pairs=1000, seed=0):
    """Largest sampled ``|F(x) - F(y)| / |x - y|`` (Euclidean) on the box.

    A diagnostic for the global Lipschitz hypothesis, not a certificate.
    """
    rng = np.random.default_rng(seed)
    x = domain.sample(rng, num_pairs)
    y = domain.sample(rng, num_pairs)
    dx = np.linalg.norm(x - y, axis=-1)
    keep = dx > 1e-12 * domain.diameter
    df = np.linalg.norm(field_(x[keep]) - field_(y[keep]), axis=-1)
    return float(np.max(df / dx[keep]))
