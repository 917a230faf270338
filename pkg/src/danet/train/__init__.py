"""Loss, optimiser, augmentation, synthetic data and the training loop."""

from .augment import IDENTITY, AugmentRanges, augment, flip_sample, frame_transform
from .loop import NumericalError, TrainConfig, TrainResult, pck_on_samples, trace_csv, train_loop, write_trace_csv
from .loss import ohkm_loss, ohkm_weights, per_keypoint_mse
from .optim import Adam, AdamState, NonFiniteGradientError, adam_step, lr_at
from .synth import SynthSample, render_figure, synth_dataset

__all__ = [
    "IDENTITY", "AugmentRanges", "augment", "flip_sample", "frame_transform",
    "NumericalError", "TrainConfig", "TrainResult", "pck_on_samples", "trace_csv", "train_loop",
    "write_trace_csv", "ohkm_loss", "ohkm_weights", "per_keypoint_mse",
    "Adam", "AdamState", "NonFiniteGradientError", "adam_step", "lr_at",
    "SynthSample", "render_figure", "synth_dataset",
]
