"""Streaming walking-guidance runtime with a trainable VLM trigger gate."""

__version__ = "0.1.0"
