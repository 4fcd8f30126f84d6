"""Option-implied densities, pricing kernels and wildfire treatment effects."""

__version__ = "0.1.0"
