"""Few-shot segmentation transfer across disjoint label spaces via clustering, at desk scale."""

__version__ = "0.1.0"
