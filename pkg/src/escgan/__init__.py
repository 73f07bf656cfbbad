"""Environmental sound classification with DWT scalograms, weighted
cycle-consistent GAN augmentation, SURF bag-of-visual-words and random
forests."""

__version__ = "0.1.0"
