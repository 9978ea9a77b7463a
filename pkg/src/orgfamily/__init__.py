"""Organization-family inference for Autonomous System Numbers."""

from __future__ import annotations

__version__ = "0.1.0"
