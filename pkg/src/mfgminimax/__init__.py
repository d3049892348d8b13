"""Minimax (viability) solution of first-order mean field games on particle measures."""
from __future__ import annotations

__version__ = "0.1.0"
