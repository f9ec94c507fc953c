"""Fleming-Viot particle approximation of quasi-stationary distributions on the torus."""

__version__ = "0.1.0"
