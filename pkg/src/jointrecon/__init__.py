"""Joint reconstruction and registration for limited-angle tomosynthesis."""

import os

# avoid the TBB warning on hosts without it; must precede the numba import
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .errors import *  # noqa: E402,F401,F403
from .geometry import Geometry, fit_detector, make_geometry, view  # noqa: E402
from .volume import Grid, ProjectionStack, Volume  # noqa: E402

__all__ = ["Geometry", "Grid", "ProjectionStack", "Volume", "fit_detector", "make_geometry", "view"]
__version__ = "0.1.0"
