"""Online pruning of filters, layers, branches and blocks with learnable scaling gates."""

__version__ = "0.1.0"
