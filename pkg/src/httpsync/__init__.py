"""HTTP request synchronization for multi-hop proxy chains."""

__version__ = "0.1.0"
