"""Multi-view super-resolution preprocessing toolkit.

Camera pose ingestion from COLMAP sparse models, pose-based auxiliary view
selection, epipolar-constrained multi-view attention with a small trainable
SR network, anti-aliased sub-pixel losses, and synthetic plane scenes for
end-to-end verification.
"""

__version__ = "0.1.0"
