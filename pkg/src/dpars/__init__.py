"""EMG finger-angle decoder with a dual attractor/refinement prediction head,
streaming DSP front end, and hardware cost accounting."""

__version__ = "0.1.0"

from .model import DparsConfig, DparsParams, ForwardTrace, forward, param_count
from .sigproc import PreprocessConfig, preprocess
from .dataset import LabeledDataset, SyntheticConfig, synthesize
from .train import TrainConfig, TrainReport, train_loop

__all__ = [
    "DparsConfig",
    "DparsParams",
    "ForwardTrace",
    "LabeledDataset",
    "PreprocessConfig",
    "SyntheticConfig",
    "TrainConfig",
    "TrainReport",
    "forward",
    "param_count",
    "preprocess",
    "synthesize",
    "train_loop",
]
