"""Metaball-based DEM-LBM simulation of irregular particles in fluid."""

__version__ = "0.1.0"
