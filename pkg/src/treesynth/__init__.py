"""Tree search for programming by example over a DeepCoder-style list DSL and Karel."""

__version__ = "0.1.0"
