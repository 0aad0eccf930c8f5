"""Compositional world-model planning for decentralized grid cooperation."""
from __future__ import annotations

__version__ = "0.1.0"
