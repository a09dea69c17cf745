"""Mixed finite element solver for 2D time-dependent bioconvection.

Incompressible Navier-Stokes flow with concentration-dependent viscosity
coupled to an advection-diffusion equation for the microorganism
concentration, discretized with mini (P1+bubble / P1) elements in space and
a two-step BDF2 scheme in time. Two linearly implicit time-stepping
variants are provided: a decoupled scheme (flow then transport, lagged
coupling terms) and a fully coupled monolithic scheme.
"""

from .assembly import ModelParams, ViscosityLaw
from .manufactured import ExactSolution, derive_forcing, error_norms
from .mesh import Mesh, build_unit_square_mesh
from .schemes import run_simulation

__all__ = [
    "ModelParams",
    "ViscosityLaw",
    "ExactSolution",
    "derive_forcing",
    "error_norms",
    "Mesh",
    "build_unit_square_mesh",
    "run_simulation",
]

__version__ = "0.1.0"
