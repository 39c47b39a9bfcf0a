"""Report containers shared by the estimators."""

from dataclasses import dataclass, field

import numpy as np

LOWER_ESTIMATE = "lower-estimate-of-sup"


def _listify(x):
    if x is None:
        return None
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (tuple, list)):
        return [_listify(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


@dataclass
class EstimateReport:
    """A sampled supremum with its uncertainty and extrapolation trace.

    ``per_h`` holds ``(h, estimate, stderr)`` rows for the pair (or per-h
    maximum) that produced the estimate. Deterministic estimators report a
    degenerate ``ci95``.
    """

    point_estimate: float
    ci95: tuple
    per_h: list = field(default_factory=list)
    argmax_pair: tuple | None = None
    argmax_point: np.ndarray | None = None
    labels: tuple = (LOWER_ESTIMATE,)
    mode: str = "slub"
    counts: dict = field(default_factory=dict)
    stderr: float = 0.0
    inconclusive: bool = False

    @property
    def ci_halfwidth(self):
        return 0.5 * (self.ci95[1] - self.ci95[0])

    def to_dict(self):
        return {
            "estimate": float(self.point_estimate),
            "ci95": [float(self.ci95[0]), float(self.ci95[1])],
            "stderr": float(self.stderr),
            "mode": self.mode,
            "labels": list(self.labels),
            "inconclusive": bool(self.inconclusive),
            "per_h": [[float(h), float(e), float(s)] for h, e, s in self.per_h],
            "argmax_pair": _listify(self.argmax_pair),
            "argmax_point": _listify(self.argmax_point),
            "counts": {k: int(v) for k, v in self.counts.items()},
        }
