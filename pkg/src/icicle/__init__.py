"""Class-incremental prototypical-part networks on numpy."""

__version__ = "0.1.0"
