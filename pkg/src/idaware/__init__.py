"""Identity-aware visual instruction toolkit."""

__version__ = "0.1.0"
