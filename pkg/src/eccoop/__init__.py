"""Fair cost allocation among energy communities under DLMP-based pricing."""

__version__ = "0.1.0"
