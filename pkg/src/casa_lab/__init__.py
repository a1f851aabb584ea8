"""Toy-scale laboratory for vision-language fusion by token insertion, cross-attention and CASA."""

__version__ = "0.1.0"
