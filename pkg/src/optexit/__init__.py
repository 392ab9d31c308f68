"""Early-exit toolkit for chain-of-thought reasoning.

Curates answer-position-labeled CoT datasets, trains a token-level exit
probe, and drives early termination against any OpenAI-compatible endpoint,
with signal analyses and compression/accuracy benchmarking.
"""

__version__ = "0.1.0"
