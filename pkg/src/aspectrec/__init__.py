"""Time- and type-aware entity aspect recommendation from query and click logs."""

__version__ = "0.1.0"
