"""Numerical checks for rotationally symmetric Ricci flow, steady solitons,
barrier functions, shrinker densities and reduced-volume geometry."""

__version__ = "0.1.0"
