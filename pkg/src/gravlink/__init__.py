"""gravlink: measurement + feedback realizations of Newtonian gravity.

Simulate continuous position/mass-density measurement with Markovian
feedback: stochastic trajectories, the corresponding deterministic master
equations, the protocol builders for the two-particle model and its N-body
generalizations, and the kernel/regularization machinery of the
density-measurement model.
"""

__version__ = "0.1.0"

from . import analysis, hilbert, kernels, master, models, stochastic

__all__ = ["analysis", "hilbert", "kernels", "master", "models",
           "stochastic", "__version__"]
