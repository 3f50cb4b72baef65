"""Random conductance laboratory: clusters, induced walks, correctors and heat-kernel checks."""

__version__ = "0.1.0"
