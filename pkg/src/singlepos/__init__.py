"""Training multi-label image classifiers when every image carries a single positive label.

The package is plain numpy: a tiny convolutional network with hand-written
gradients, the assume-negative / expected-negative family of losses, running
average score and heatmap stores with crop-aware updates, expected-positive
mining, a synthetic multi-object dataset and the usual evaluation metrics.
"""

from .losses import NEG, POS, UNKNOWN

__version__ = "0.1.0"

__all__ = ["POS", "NEG", "UNKNOWN", "__version__"]
