"""Environment-aware channel knowledge base and CKB-driven JSCC simulator."""

__version__ = "0.1.0"
