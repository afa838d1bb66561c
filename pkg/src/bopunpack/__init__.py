"""Generic unpacker built on dynamic binary instrumentation of the BOP-32 toy ISA."""
from __future__ import annotations

__version__ = "0.1.0"
