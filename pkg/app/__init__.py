"""Consumer segmentation and lookalike pipeline."""

__version__ = "0.1.0"
