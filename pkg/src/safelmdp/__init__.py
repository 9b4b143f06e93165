"""Safe exploration in finite-horizon linear MDPs."""

__version__ = "0.1.0"
