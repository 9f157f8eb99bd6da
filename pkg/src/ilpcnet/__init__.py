"""LP-MDN neural vocoder: linear prediction with a mixture-density output head."""
from .dsp import AudioBuffer, FeatureTrack, FrameConfig, extract_features
from .lpmdn import MogParams, NetHeads, heads_to_mog, mog_nll, mog_sample, sharpen
from .model import ModelConfig, Vocoder
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "AudioBuffer", "FeatureTrack", "FrameConfig", "extract_features",
    "MogParams", "NetHeads", "heads_to_mog", "mog_nll", "mog_sample", "sharpen",
    "ModelConfig", "Vocoder", "TrainConfig", "train", "save_checkpoint", "load_checkpoint",
]

__version__ = "0.1.0"
