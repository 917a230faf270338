"""DANet pose estimation: attention blocks, model, codec, training and evaluation."""

__version__ = "0.1.0"
