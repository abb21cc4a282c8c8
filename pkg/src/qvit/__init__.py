"""Exact simulation and training of quantum vision transformers built from
RBS-gate orthogonal layers."""

__version__ = "0.1.0"
