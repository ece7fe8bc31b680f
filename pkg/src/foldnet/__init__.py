"""Variable-length 1D convolutional fold classification and fold-embedding analysis."""

from .encode import EncodedProtein, SyntheticSpec, encode_protein, generate_synthetic
from .model import ModelConfig, ModelState, build_model, load_checkpoint, save_checkpoint
from .train import TrainSchedule, evaluate_topk

__version__ = "0.1.0"
