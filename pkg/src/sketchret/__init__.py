"""Cross-modal sketch-to-image retrieval with attention-guided tokenization."""

__version__ = "0.1.0"
