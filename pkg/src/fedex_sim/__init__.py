"""Simulation and route planning for federated learning over mobile transporters."""

__version__ = "0.1.0"
