"""Multiple Token Divergence toolkit."""

from ._mtdlab import *  # noqa: F401,F403
from ._mtdlab import __version__  # noqa: F401
