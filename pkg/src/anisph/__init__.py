"""Anisotropic k-nearest-neighbor smoothed particle hydrodynamics."""

__version__ = "0.1.0"

from .kernel import KernelSpec, kernel_gradient, kernel_value
from .metric import (
    Ellipsoid,
    MetricTensor,
    estimate_covariance,
    invert_spd,
    neighbor_ellipsoid,
    quadratic_distance,
)
from .neighbors import (
    EffectiveNeighbors,
    NeighborRelation,
    Octree,
    adaptive_metric_knn,
    brute_force_knn,
    build_octree,
    knn_all,
    knn_query,
    symmetric_closure,
)
from .particles import ParticleTable, Snapshot, create_table, get_attribute
from .sph import (
    ForceConfig,
    NumericalError,
    PairTerms,
    SPHPipeline,
    apply_eos,
    build_pair_terms,
    compute_density,
    compute_forces,
    interpolate_gradient,
    interpolate_scalar,
    step,
)
