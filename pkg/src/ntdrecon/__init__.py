"""Semilinear anisotropic Neumann problems, NtD maps and boundary determination."""

__version__ = "0.1.0"
