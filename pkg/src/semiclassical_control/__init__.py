"""Control synthesis and verification for the semiclassical cubic Schrodinger equation on the circle."""

__version__ = "0.1.0"
