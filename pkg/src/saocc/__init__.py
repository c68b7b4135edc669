"""Sign-agnostic optimization of convolutional occupancy networks."""

__version__ = "0.1.0"
