"""Simulation and analysis toolkit for fluorescence-detected EPR."""

__version__ = "0.1.0"
