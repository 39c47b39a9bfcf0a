"""Contraction analysis of ODEs and Ito SDEs: matrix measures, logarithmic
Lipschitz constants, Milstein ensembles and contraction experiments."""

from . import detlip, experiments, models, norms, sde, stochlip
from .models import DomainBox, SystemModel, builtin
from .norms import L1, L2, LINF, NormKind, NormSpec, matrix_measure

__version__ = "0.1.0"

__all__ = ["detlip", "experiments", "models", "norms", "sde", "stochlip", "DomainBox", "SystemModel",
           "builtin", "L1", "L2", "LINF", "NormKind", "NormSpec", "matrix_measure"]
