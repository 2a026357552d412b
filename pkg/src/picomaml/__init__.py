"""Hybrid autoregressive / meta-learning pretraining of small decoders, with NER probes."""

__version__ = "0.1.0"
