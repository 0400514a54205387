"""Frequency-domain diffuse optical tomography on triangular meshes.

Forward solver (P1 finite elements), adjoint Jacobian, regularizers,
iteratively regularized Gauss-Newton, a pilot adaptive Metropolis sampler
and an experiment harness.
"""

from .forward import DEFAULT_K, MeasurementSet, SourceBank, assemble, forward_map, trig_sources, wavenumber
from .harness import ExperimentConfig, add_noise, relative_error, run_experiment
from .irgn import IrgnConfig, run_irgn
from .jacobian import adjoint_jacobian, fd_jacobian
from .mcmc import Schedule, diagnostics, posterior_mean, run_pilot_metropolis
from .mesh import Mesh, edge_adjacency, generate_disk_mesh, load_mesh, save_mesh
from .model import DotModel
from .phantom import Circle, Inclusion, ParameterField, Phantom, rasterize

__version__ = "0.1.0"
