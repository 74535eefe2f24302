"""Dynamical system optimization: parameterized Markov chains and their costs."""

__version__ = "0.1.0"
