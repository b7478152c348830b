"""Granularity-selective prefix transforms over frozen vision-language embedding caches."""

__version__ = "0.1.0"
