"""Progressive modality masking with gradient-based filtering on a toy two-modality model."""

__version__ = "0.1.0"
