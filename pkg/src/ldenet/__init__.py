"""Low-light enhancement by latent Content/Illumination disentanglement.

Built on a small reverse-mode autodiff engine over numpy (``ldenet.autodiff``).
"""

from .autodiff import Tensor, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DegradeParams, ImagePair, load_dataset, load_png, save_png, synth_dataset, synth_pair
from .errors import CheckpointError, ConfigError, DataError, NonFiniteError, ShapeError, TrainingAborted
from .losses import LossWeights, SsimParams, enhancement_loss, psnr, ssim
from .models import LDENet, ModelConfig, param_count
from .training import TrainConfig, cosine_lr, eval_cross_reconstruction, train_disentangle, train_enhance

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigError", "DataError", "DegradeParams", "ImagePair", "LDENet",
    "LossWeights", "ModelConfig", "NonFiniteError", "ShapeError", "SsimParams", "Tensor", "TrainConfig",
    "TrainingAborted", "cosine_lr", "enhancement_loss", "eval_cross_reconstruction", "load_checkpoint",
    "load_dataset", "load_png", "no_grad", "param_count", "psnr", "save_checkpoint", "save_png", "ssim",
    "synth_dataset", "synth_pair", "train_disentangle", "train_enhance",
]
