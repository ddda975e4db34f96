"""Multi-level contrastive pre-training for cross-lingual embedding alignment, in numpy."""

__version__ = "0.1.0"
