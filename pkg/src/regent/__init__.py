"""Retrieval-augmented generalist agents at desk scale.

Retrieve-and-Play, the distance-weighted interpolation with a small causal
transformer, toy environment families, binary data formats and numerical
checks of the coverage bounds.
"""

__version__ = "0.1.0"
