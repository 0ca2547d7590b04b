"""Multiple-point simulation of categorical 3D grids with a recursive chain of CNNs."""

__version__ = "0.1.0"
