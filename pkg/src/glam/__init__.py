"""Graph-based layout analysis for parsed PDF text cells."""

__version__ = "0.1.0"
