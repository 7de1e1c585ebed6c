"""rclab: a numerical laboratory for stochastic recursive control.

Controlled SDE simulation, BSDE solving under monotone (non-Lipschitz)
drivers, driver mollification/truncation, a monotone HJB finite-difference
solver, and a dynamic-programming-principle verifier, wired together in a
reproducible Epstein-Zin portfolio scenario.
"""

__version__ = "0.1.0"
