"""Joint video moment retrieval and highlight detection over pre-extracted features."""

__version__ = "0.1.0"
