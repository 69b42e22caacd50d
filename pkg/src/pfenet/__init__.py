"""Few-shot segmentation on numpy: cosine prior masks, multi-scale enrichment, episodic training."""
from .backbone import Backbone, count_parameters, load_backbone, pretrain, save_backbone
from .episodes import DatasetConfig, Episode, FoldSplit, SynthDataset, episode_stream, generate, sample_episode, split
from .fem import PATHS, FemState, MergeUnit, ScaleSet, schedule_path
from .metrics import IoUAccumulator, fb_iou, miou, stability
from .model import (
    VARIANTS,
    ModelConfig,
    NonFiniteLoss,
    OptimConfig,
    PFENet,
    load_checkpoint,
    save_checkpoint,
    total_loss,
    train_step,
    variant_config,
)
from .prior import PriorConfig, PriorMask, average_priors, generate_prior, prior_from_features
from .tensor import ContractError, Tensor

__all__ = [
    "Backbone", "count_parameters", "load_backbone", "pretrain", "save_backbone",
    "DatasetConfig", "Episode", "FoldSplit", "SynthDataset", "episode_stream", "generate", "sample_episode", "split",
    "PATHS", "FemState", "MergeUnit", "ScaleSet", "schedule_path",
    "IoUAccumulator", "fb_iou", "miou", "stability",
    "VARIANTS", "ModelConfig", "NonFiniteLoss", "OptimConfig", "PFENet", "load_checkpoint", "save_checkpoint",
    "total_loss", "train_step", "variant_config",
    "PriorConfig", "PriorMask", "average_priors", "generate_prior", "prior_from_features",
    "ContractError", "Tensor",
]
