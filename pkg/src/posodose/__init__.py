"""Structuring of French medication dosage instructions.

A deterministic rule pipeline (normalize, recognize, link, compose) produces
canonical posology records; a confidence model scores them and an optional
LLM path handles low-confidence queries.
"""

from __future__ import annotations

__version__ = "0.1.0"
