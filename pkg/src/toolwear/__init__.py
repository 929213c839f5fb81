"""Worn cutting-insert characterization: synthetic corpus, VGG-16 features,
gradient boosting, cross-validated MCC and a cell-wise segmentation baseline."""

__version__ = "0.1.0"
