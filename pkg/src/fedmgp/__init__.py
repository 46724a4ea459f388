"""Desk-scale federated continual learning with global prompt pools, class-wise local prefixes
and server-side prompt distillation."""
from __future__ import annotations

__version__ = "0.1.0"
