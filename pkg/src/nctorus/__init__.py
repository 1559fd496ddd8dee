"""Conformal spectral invariants of the noncommutative two-torus.

The package derives, by exact term rewriting, the closed form of the
constant heat coefficient of the conformally rescaled Laplacian k.lap.k
(equivalently the value at the origin of its spectral zeta function), and
cross-checks every rewriting step against finite-dimensional matrix
models.  See README.md for the pipeline and the verification suite.
"""

__version__ = "0.1.0"
