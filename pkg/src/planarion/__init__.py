"""Simulation and analysis tools for planar Coulomb crystals in linear rf traps."""

__version__ = "0.1.0"
