"""
Shock Adjoint Package

Viscous primal/adjoint solvers and adjoint error representation
for steady 1D balance laws with a shock.
"""

__version__ = "0.1.0"
