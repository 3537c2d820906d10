"""Shape-priors-based adversarial regularization for multi-structure segmentation."""

__version__ = "0.1.0"
