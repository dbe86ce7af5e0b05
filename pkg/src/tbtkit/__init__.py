"""Ternary and binary quantization-aware training for small transformers."""

__version__ = "0.1.0"
