"""Scaling-law predictions for feature learning in small networks.

Modules: ``numerics`` (quadrature, RNG streams, eigendecompositions),
``kernels`` (NNGP kernels and RKHS norms), ``scalecalc`` (variational energy
budgets), ``ldt`` (large-deviation saddle point), ``sgldlab`` (Langevin
ensembles) and ``cli``.
"""

__version__ = "0.1.0"
