"""Conditional score-based diffusion for ERP epochs, with an evaluation metric suite."""
from .epochs import CANONICAL_19, CANONICAL_LAYOUT, ChannelLayout, ConditionKey, Epoch, EpochSet, UNCONDITIONAL
from .preprocess import ContinuousRecording, PreprocessConfig, preprocess_recording
from .dataio import SyntheticSpec, generate_synthetic, load_epochs, save_epochs, split_train_val
from .model import ModelConfig, ScoreNet
from .diffusion import SampleConfig, TrainConfig, VpSchedule, pc_sample, sample_matched, train

__version__ = "0.1.0"

__all__ = [
    "CANONICAL_19", "CANONICAL_LAYOUT", "ChannelLayout", "ConditionKey", "ContinuousRecording", "Epoch",
    "EpochSet", "ModelConfig", "PreprocessConfig", "SampleConfig", "ScoreNet", "SyntheticSpec", "TrainConfig",
    "UNCONDITIONAL", "VpSchedule", "generate_synthetic", "load_epochs", "pc_sample", "preprocess_recording",
    "sample_matched", "save_epochs", "split_train_val", "train",
]
