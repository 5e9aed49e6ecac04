"""State-dependent Poisson shot noise: simulation, fluid limits, rate
functions and rare-event Monte Carlo."""

try:
    from ._shotnoise import *  # noqa: F401,F403
    from ._shotnoise import __version__  # noqa: F401
except ImportError:  # in-tree test builds place the module on sys.path directly
    from _shotnoise import *  # noqa: F401,F403
    from _shotnoise import __version__  # noqa: F401
