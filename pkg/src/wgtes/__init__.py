"""Simulation and metrology tools for waveguide-integrated TES photon counters."""

__version__ = "0.1.0"
