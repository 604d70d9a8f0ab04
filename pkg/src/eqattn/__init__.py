"""Exact bounded-precision attention arithmetic and equality constructions."""

__version__ = "0.1.0"
