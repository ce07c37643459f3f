"""Finite cell Stokes solver with an adaptive geometric multigrid method."""

__version__ = "0.1.0"
