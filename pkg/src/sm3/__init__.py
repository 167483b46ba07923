"""Self-supervised multi-modality, multi-label pretraining at desk scale."""

__version__ = "0.1.0"
