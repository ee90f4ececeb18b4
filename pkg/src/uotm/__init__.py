"""Semi-dual unbalanced optimal transport generative modeling at toy scale."""

__version__ = "0.1.0"
