"""Text-driven motion retrieval and neural mesh stylization."""

__version__ = "0.1.0"
