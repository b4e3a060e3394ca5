"""Ray-marched volume rendering of voxel grids; alias of :mod:`splatocc.volume`."""

from .volume import *  # noqa: F401,F403
from .volume import __all__  # noqa: F401
