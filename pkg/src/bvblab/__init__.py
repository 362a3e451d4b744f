"""Operator symbol algebra, ellipticity certification, and a discrete grid
laboratory for functions whose distributional image under a constant-coefficient
operator is a measure.

The package is organized in four layers:

* :mod:`bvblab.tensor_core` -- multi-index combinatorics, symmetric-tensor
  coordinates, and subspace algebra (images, kernels, intersections).
* :mod:`bvblab.operator_algebra` -- homogeneous constant-coefficient operators,
  their symbols, polynomial kernels, and the order-reduction to first order.
* :mod:`bvblab.ellipticity` -- ellipticity / complex-ellipticity decisions and
  the hyperplane mixing test.
* :mod:`bvblab.field_lab` -- grid fields, discrete operator application, jump
  synthesis and detection, densities, Riesz potentials, and polynomial
  projections.

Hot numeric kernels live in :mod:`bvblab._kernels`, which selects between a
numba-compiled path and a pure-numpy fallback (``BVB_NUMBA=0`` forces the
fallback).
"""

__version__ = "0.1.0"

from . import tensor_core, operator_algebra, ellipticity, field_lab

__all__ = [
    "tensor_core",
    "operator_algebra",
    "ellipticity",
    "field_lab",
    "__version__",
]
