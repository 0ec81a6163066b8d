"""Influence-based valuation, contrastive cleansing and policy-searched augmentation
for small grayscale classification datasets."""

__version__ = "0.1.0"
