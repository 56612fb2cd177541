"""Multi-cloud appliance deployment gateway."""

__version__ = "0.1.0"
