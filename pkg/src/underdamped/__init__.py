"""Statistical error of underdamped Langevin integrators."""

__version__ = "0.1.0"
