"""Desk-scale lab for vision shortcuts in language-conditioned policies and
dual-branch action guidance."""

__version__ = "0.1.0"
