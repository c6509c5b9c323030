"""Hierarchical prototype learning over spatiotemporal feature grids in the
Poincare ball."""

__version__ = "0.1.0"


class ToolkitError(Exception):
    """Base class for errors raised by this package."""
