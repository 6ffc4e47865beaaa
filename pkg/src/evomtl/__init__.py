"""Desk-scale evolutionary architecture search for deep multitask
networks: a small float64 autodiff core, soft-merge network assembly,
speciated module/blueprint evolution, per-task routing evolution, and a
coordinator/worker evaluation harness."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    AssemblyError, ConfigError, DataError, DimensionError, EvoMtlError,
    HarnessError, NumericError, ParseError, StateError,
)
