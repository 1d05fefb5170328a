"""Safe stochastic optimal control via deep FBSDE learning with a CBF-QP safety layer."""

__version__ = "0.1.0"
