"""Structure-preserving finite elements for stationary incompressible
magnetohydrodynamics in magnetic-field/electric-field variables."""

__version__ = "0.1.0"
