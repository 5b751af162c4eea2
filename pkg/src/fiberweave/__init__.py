"""fiberweave: fiber-level woven fabric generation, rendering, and fitting."""

__version__ = "0.1.0"
