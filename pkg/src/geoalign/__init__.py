"""Region-aware contrastive image-text alignment at desk scale."""

__version__ = "0.1.0"
