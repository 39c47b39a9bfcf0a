"""Vector norms, induced operator norms and matrix measures.

All matrix functions accept a single ``(n, n)`` matrix or a stack of shape
``(..., n, n)``; stacked inputs are evaluated elementwise and return an array
of the leading shape.

A weighted norm ``||x|| := ||P x||_kind`` induces the operator norm and the
measure of ``P A P^-1`` under the unweighted kind.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ._fit import check_ladder, intercept_weights, smallest_rungs

DEFAULT_COND_CAP = 1e8
DEFAULT_LIMIT_LADDER = (8e-5, 4e-5, 2e-5, 1e-5)


class NormKind(str, Enum):
    L1 = "L1"
    L2 = "L2"
    LINF = "Linf"


_KIND_ALIASES = {
    "l1": NormKind.L1, "1": NormKind.L1,
    "l2": NormKind.L2, "2": NormKind.L2,
    "linf": NormKind.LINF, "inf": NormKind.LINF, "l_inf": NormKind.LINF,
}


class WeightError(ValueError):
    """The weight matrix of a norm is not usable."""


@dataclass(frozen=True)
class NormSpec:
    """Vector norm selector, optionally weighted by an invertible matrix."""

    kind: NormKind = NormKind.L2
    weight: np.ndarray | None = None
    cond_cap: float = DEFAULT_COND_CAP
    _inverse: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        kind = self.kind
        if not isinstance(kind, NormKind):
            try:
                kind = _KIND_ALIASES[str(kind).lower()]
            except KeyError:
                raise ValueError(f"unknown norm kind {self.kind!r}; expected L1, L2 or Linf") from None
            object.__setattr__(self, "kind", kind)
        if self.weight is None:
            return
        P = np.array(self.weight, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise WeightError(f"weight must be a square matrix, got shape {P.shape}")
        if not np.all(np.isfinite(P)):
            raise WeightError("weight has non-finite entries")
        cond = np.linalg.cond(P)
        if not np.isfinite(cond) or cond > self.cond_cap:
            raise WeightError(f"weight is singular or ill-conditioned (cond={cond:.3g} > {self.cond_cap:.3g})")
        P.setflags(write=False)
        inv = np.linalg.inv(P)
        inv.setflags(write=False)
        object.__setattr__(self, "weight", P)
        object.__setattr__(self, "_inverse", inv)

    @property
    def weight_inverse(self):
        return self._inverse

    def describe(self):
        out = {"kind": self.kind.value}
        if self.weight is not None:
            out["weight"] = self.weight.tolist()
        return out

    @classmethod
    def parse(cls, spec):
        """Build from ``"L2"``, ``{"kind": "L1", "weight": [[...]]}`` or a NormSpec."""
        if isinstance(spec, cls):
            return spec
        if isinstance(spec, (str, NormKind)):
            return cls(kind=spec)
        if isinstance(spec, dict):
            return cls(kind=spec.get("kind", "L2"), weight=spec.get("weight"))
        raise TypeError(f"cannot interpret {spec!r} as a norm")


L1 = NormSpec(NormKind.L1)
L2 = NormSpec(NormKind.L2)
LINF = NormSpec(NormKind.LINF)


def _check_square(A, norm):
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    if norm.weight is not None:
        if norm.weight.shape[0] != A.shape[-1]:
            raise ValueError(f"weight is {norm.weight.shape[0]}x{norm.weight.shape[0]} but matrix is {A.shape[-1]}x{A.shape[-1]}")
        A = norm.weight @ A @ norm.weight_inverse
    return A


def vector_norm(x, norm=L2):
    """Norm of ``x`` (or of each row of a stack ``(..., n)``)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("vector has non-finite entries")
    return _vector_norm_unchecked(x, norm)


def _vector_norm_unchecked(x, norm):
    if norm.weight is not None:
        if x.shape[-1] != norm.weight.shape[0]:
            raise ValueError(f"vector dimension {x.shape[-1]} does not match weight dimension {norm.weight.shape[0]}")
        x = x @ norm.weight.T
    if norm.kind is NormKind.L1:
        return np.abs(x).sum(axis=-1)
    if norm.kind is NormKind.LINF:
        return np.abs(x).max(axis=-1)
    return np.sqrt(np.einsum("...i,...i->...", x, x))


def operator_norm(A, norm=L2):
    """Operator norm of ``A`` induced by ``norm``."""
    A = _check_square(A, norm)
    if norm.kind is NormKind.L1:
        return np.abs(A).sum(axis=-2).max(axis=-1)
    if norm.kind is NormKind.LINF:
        return np.abs(A).sum(axis=-1).max(axis=-1)
    return np.linalg.norm(A, ord=2, axis=(-2, -1))


def matrix_measure(A, norm=L2):
    """Logarithmic norm (matrix measure) of ``A`` in closed form.

    L1 uses column sums, Linf row sums, and L2 half the largest eigenvalue of
    ``A + A^T`` from a symmetric eigensolver.
    """
    A = _check_square(A, norm)
    diag = np.diagonal(A, axis1=-2, axis2=-1)
    absdiag = np.abs(diag)
    if norm.kind is NormKind.L1:
        return (diag + np.abs(A).sum(axis=-2) - absdiag).max(axis=-1)
    if norm.kind is NormKind.LINF:
        return (diag + np.abs(A).sum(axis=-1) - absdiag).max(axis=-1)
    sym = 0.5 * (A + np.swapaxes(A, -1, -2))
    return np.linalg.eigvalsh(sym)[..., -1]


def matrix_measure_limit(A, norm=L2, h_ladder=DEFAULT_LIMIT_LADDER):
    """Matrix measure from the one-sided limit ``(||I + hA|| - 1)/h``.

    The ladder is divided by ``max(1, ||A||)`` per matrix, the difference
    quotient is evaluated on it and extrapolated to ``h -> 0`` by a linear
    least-squares fit over the three smallest rungs. Independent of
    :func:`matrix_measure`, so it serves as its oracle.
    """
    h = check_ladder(h_ladder)
    if h[-1] < 1e3 * np.finfo(float).eps:
        raise ValueError("smallest h must be at least 1e3 * machine epsilon")
    A = np.asarray(A, dtype=float)
    _check_square(A, norm)
    n = A.shape[-1]
    eye = np.eye(n)
    if norm.weight is not None:
        # ||I + hA||_P = ||I + h PAP^-1||; forming P(I + hA)P^-1 would cancel badly
        A = norm.weight @ A @ norm.weight_inverse
        norm = NormSpec(norm.kind)
    # the quotient's curvature grows with ||A||, so the steps shrink with it
    scale = np.maximum(1.0, operator_norm(A, norm))[..., None, None]
    quotients = np.stack(
        [((operator_norm(eye + (hk / scale) * A, norm) - 1.0) / hk) for hk in h], axis=-1
    ) * scale[..., 0, 0, None]
    idx = smallest_rungs(h)
    c = intercept_weights(h[idx])
    return quotients[..., idx] @ c
