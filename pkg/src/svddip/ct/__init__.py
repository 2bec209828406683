"""CT acquisition: geometries, projectors, reconstruction baselines, noise and phantoms."""

from .geometry import MatrixOperator, ParallelGeometry, joseph_matrix
from .noise import (
    DEFAULT_PHOTONS,
    MIN_COUNT,
    MU_MAX,
    add_gaussian_noise,
    add_noise,
    hu_to_mu,
    poisson_counts,
    simulate_poisson_prelog,
)
from .operators import (
    FilteredAdjoint,
    Sinogram,
    apply_matrix,
    apply_matrix_T,
    disk_phantom,
    fbp,
    initial_reconstruction,
    load_matrix_operator,
    radon_forward,
    ramp_filter,
    save_matrix_operator,
)
from .phantoms import generate_ellipses

__all__ = [
    "DEFAULT_PHOTONS",
    "FilteredAdjoint",
    "MIN_COUNT",
    "MU_MAX",
    "MatrixOperator",
    "ParallelGeometry",
    "Sinogram",
    "add_gaussian_noise",
    "add_noise",
    "apply_matrix",
    "apply_matrix_T",
    "disk_phantom",
    "fbp",
    "generate_ellipses",
    "hu_to_mu",
    "initial_reconstruction",
    "joseph_matrix",
    "load_matrix_operator",
    "poisson_counts",
    "radon_forward",
    "ramp_filter",
    "save_matrix_operator",
    "simulate_poisson_prelog",
]
