"""End-to-end CTC spoken language understanding toolkit."""

__version__ = "0.1.0"
