"""Second-order meta-training of a tiny language model for in-context learning."""

__version__ = "0.1.0"
