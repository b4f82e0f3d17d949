"""Stochastic decision toolkit: forward SDEs, regression BSDEs, convex viability, HJB grids, policies."""

__version__ = "0.1.0"

from .bsde import *  # noqa: E402,F401,F403
from .decision import *  # noqa: E402,F401,F403
from .errors import *  # noqa: E402,F401,F403
from .geometry import *  # noqa: E402,F401,F403
from .hjb import *  # noqa: E402,F401,F403
from .sde import *  # noqa: E402,F401,F403
from .viability import *  # noqa: E402,F401,F403
from .catalog import build, catalog_list  # noqa: E402,F401
