"""FLOPs-targeted structured sparsity training with hard concrete gates."""

__version__ = "0.1.0"
