"""Heterogeneous vehicle-infrastructure cooperative BEV detection at desk scale."""

__version__ = "0.1.0"
