"""Numerical diagnostics for weak-* local minimality of integral functionals of the gradient."""

__version__ = "0.1.0"

from .errors import VarlocalError  # noqa: E402

__all__ = ["VarlocalError", "__version__"]
