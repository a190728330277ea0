"""Explicit finite-dimensional models of quantum experiments, built from
unitary evolution alone, with verification checks showing that the standard
measurement rules (outcome subspaces, definite readings, frequency
probabilities, apparent collapse) hold as exact or limiting properties."""

from . import checks, engine, linalg, model

__all__ = ["checks", "engine", "linalg", "model"]
__version__ = "0.1.0"
