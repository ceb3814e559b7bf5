"""Single-workstation SPMD emulation of distributed multi-robot MPC."""

__version__ = "0.1.0"
