"""Attentional, cycle-consistent text-to-image generation at desk scale."""

from .config import TrainConfig, load_config
from .damsm import Hyperparameters, damsm_loss, total_objective
from .dataset import CaptionDataset, Vocabulary, build_vocabulary, generate_synthetic_dataset, tokenize
from .evaluation import inception_score, kl_divergence
from .generator import StackedGenerator, generate
from .text_encoder import TextEncoder

__version__ = "0.1.0"
