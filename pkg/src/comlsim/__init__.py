"""Composable latent-space PDE solver on decomposed Cartesian grids."""

__version__ = "0.1.0"
