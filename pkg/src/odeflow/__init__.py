"""Continuous-depth attention dynamics: an autonomous ODE transformer block,
its integration, training, distillation from a layered teacher, and stability analysis."""

from . import container, data, diffcore, distill, dynamics, integrator, models, stability
from .diffcore import ContractError, ShapeError, Tensor
from .dynamics import OdeBlockParams, psi, spectral_init
from .integrator import DivergenceError, Trajectory, euler_integrate
from .models import OdeViT, TeacherViT

__version__ = "0.1.0"

__all__ = [
    "container", "data", "diffcore", "distill", "dynamics", "integrator", "models", "stability",
    "ContractError", "ShapeError", "Tensor", "OdeBlockParams", "psi", "spectral_init",
    "DivergenceError", "Trajectory", "euler_integrate", "OdeViT", "TeacherViT",
]
