"""Context-deconfounded training for context-aware emotion recognition."""

__version__ = "0.1.0"
