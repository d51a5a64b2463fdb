"""Joint flow-image denoising and flow-domain recovery.

A physics-informed fit of the steady Navier-Stokes equations alternates with a
quasi-conformal correction of the domain mask.
"""

from flowrecon.grid import GridSpec, ScalarField, VectorField2

__version__ = "0.1.0"

__all__ = ["GridSpec", "ScalarField", "VectorField2", "__version__"]
