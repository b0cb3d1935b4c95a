"""Graph reasoning-and-acting over text-attributed graphs."""

__version__ = "0.1.0"
