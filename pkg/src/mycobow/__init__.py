"""Bag-of-words / Fisher Vector pipeline for fungi microscopy scans.

Stages: 16-bit scans are contrast-stretched and downscaled, segmented
into foreground/background, cut into gated patches, described by local
descriptors, pooled into BoW histograms or Fisher Vectors, and
classified with a one-vs-rest SVM or a random forest. Evaluation runs
the preparation-wise two-fold protocol with an inner grid search.
"""

__version__ = "0.1.0"
