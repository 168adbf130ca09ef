"""Scattering by many small impedance particles and metamaterial design."""

__version__ = "0.1.0"
