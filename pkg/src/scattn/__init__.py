"""Spatial and channel-wise attention for encoder-decoder captioning.

A small, dependency-light library built around an inspectable numpy
autodiff core: attention that reweights both *where* (spatial locations)
and *what* (channels) of a convolutional feature map, applied at several
encoder layers, feeding an LSTM decoder. Ships with a synthetic scene
corpus so every moving part can be trained and verified end to end in
minutes.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad, backward, finite_diff_check  # noqa: F401
