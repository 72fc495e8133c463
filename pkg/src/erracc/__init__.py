"""Error accumulation in autoregressive probabilistic forecasters on Lorenz systems."""

__version__ = "0.1.0"
