"""Shared error type carrying a machine-readable failure code."""

from __future__ import annotations


class GraspError(Exception):
    """Raised for any contract violation; ``code`` is a stable identifier."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
