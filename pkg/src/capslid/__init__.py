"""Spoken language identification with capsule networks on spectrogram images."""

from .dsp import PcmSignal, StftConfig, read_wav, signal_to_model_input, write_wav
from .model import MarginLossConfig, ModelConfig, forward, init_params
from .nonclass import ThresholdTable, calibrate, detect
from .training import Checkpoint, TrainConfig, load_checkpoint, predict, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "MarginLossConfig",
    "ModelConfig",
    "PcmSignal",
    "StftConfig",
    "ThresholdTable",
    "TrainConfig",
    "calibrate",
    "detect",
    "forward",
    "init_params",
    "load_checkpoint",
    "predict",
    "read_wav",
    "save_checkpoint",
    "signal_to_model_input",
    "train",
    "write_wav",
]
