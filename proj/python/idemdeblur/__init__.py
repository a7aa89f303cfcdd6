"""Idempotent progressive deblurring.

Images are float32 arrays shaped (3, H, W) or (N, 3, H, W) with values in
[0, 1]. Normalization to [-1, 1] happens inside the bindings.
"""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401

__version__ = "0.1.0"
