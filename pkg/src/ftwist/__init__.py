"""Twisted-product Finsler metrics: closed-form block formulas checked
against a finite-difference Finsler engine."""

from . import classify, core, diffkit, metrics, twisted, verification
from .errors import (ConfigError, ConstructionError, DegeneracyError, DegenerateFlagError,
                     DomainError, FtwistError, OrderOverflowError)

__version__ = "0.1.0"

__all__ = ["classify", "core", "diffkit", "metrics", "twisted", "verification",
           "ConfigError", "ConstructionError", "DegeneracyError", "DegenerateFlagError",
           "DomainError", "FtwistError", "OrderOverflowError"]
