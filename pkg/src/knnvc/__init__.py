"""kNN voice conversion over speech feature frames, with text-to-voice matching and evaluation metrics."""

__version__ = "0.1.0"
