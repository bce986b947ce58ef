"""Open-world semantic segmentation on synthetic scenes.

Trains a small convolutional feature extractor into a fixed-prototype
metric space, scores out-of-distribution pixels by distance statistics,
composes open-set predictions, and absorbs novel classes from a few
annotated shots without touching old parameters.
"""

__version__ = "0.1.0"
