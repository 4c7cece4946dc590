"""Histopathology patch atlas: annotation parsing, patching, embedding storage,
exact k-NN retrieval, evaluation, cluster analytics and t-SNE projection."""

__version__ = "0.1.0"
