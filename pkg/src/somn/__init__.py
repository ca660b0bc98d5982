"""Sleep staging with context fusion.

Two-stage pipeline: a transformer encoder turns each 30-second
polysomnography epoch into a feature vector, and a 1D convolutional
aggregator labels the whole night at once. Clinical metadata and
per-epoch expert event annotations can be fused into the aggregator
input or predicted as auxiliary tasks.
"""

__version__ = "0.1.0"
