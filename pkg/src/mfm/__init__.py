"""Meta flow matching: flow models conditioned on an embedding of the initial population."""

__version__ = "0.1.0"
