"""Opinion-unaware video quality indices and their fine-tuning toolkit."""

__version__ = "0.1.0"
