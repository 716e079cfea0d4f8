"""edgkit: exchange-driven cluster growth.

Mean-field ODE integration, exact kinetic Monte Carlo of the underlying
particle system, equilibrium and condensation analysis, energy-dissipation
functionals with their variational identities, and exact small-system
enumeration for detailed-balance and entropy-scaling checks.
"""

__version__ = "0.1.0"

from . import equilibrium, gibbs, kernels, meanfield, metrics, netflux, particle, variational  # noqa: F401
