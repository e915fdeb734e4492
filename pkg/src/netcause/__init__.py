"""Treatment effect estimation under network interference."""

__version__ = "0.1.0"
