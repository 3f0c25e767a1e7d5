"""Quality assessment tooling for super-resolved images."""

__version__ = "0.1.0"
