"""Vertex and pixel Gaussian splatting; alias of :mod:`splatocc.splat`."""

from .splat import *  # noqa: F401,F403
from .splat import __all__  # noqa: F401
