"""Executable caremap toolkit: DSL, validation, conformance, and synthesis."""

__version__ = "0.1.0"
