"""Role-based access control engine with role lifecycle tooling."""

from __future__ import annotations

__version__ = "0.1.0"
