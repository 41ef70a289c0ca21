"""Unsupervised discovery of physiological states in sparse, irregular vital-sign time series.

A triplet Transformer encoder is pretrained by forecasting, then refined by
alternating k-means pseudo-labelling with classification.
"""

__version__ = "0.1.0"
