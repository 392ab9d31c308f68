"""Hidden-state feature extraction for the optexit toolkit.

Runs a local causal LM over stored traces (teacher forcing) or fresh
prompts, dumping per-token final-layer hidden states into OPTX sidecars and
top-K logprobs into the trace file format.
"""

__version__ = "0.1.0"
