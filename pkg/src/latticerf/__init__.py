"""Unsupervised lattice point-cloud reconstruction with inverse-distance-weighted rendering."""

__version__ = "0.1.0"
