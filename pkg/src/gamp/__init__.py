"""Adversarially trained movement primitives with classical density discriminators."""

__version__ = "0.1.0"
