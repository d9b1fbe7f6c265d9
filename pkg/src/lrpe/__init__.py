"""Low-resolution prior equilibrium reconstruction for sparse-view and limited-angle CT."""

__version__ = "0.1.0"
