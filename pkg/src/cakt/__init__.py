"""Convolution-augmented knowledge tracing toolkit.

Predicts a student's correctness on the next question from her interaction
history, combining an LSTM over the full sequence with a 3D-convolutional
feature extracted from the k most recent attempts on the same concept.
"""

from cakt.config import CAKTConfig, TrainConfig, VARIANTS

__version__ = "0.1.0"

__all__ = ["CAKTConfig", "TrainConfig", "VARIANTS", "__version__"]
