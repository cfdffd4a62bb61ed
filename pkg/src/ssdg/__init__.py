"""Self-supervised pretext pretraining and domain-generalization fine-tuning."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError, ShapeError, SSDGError
from .gabor import GaborBankConfig, build_gabor_bank, make_target, reconstruction_loss
from .pretext import expand_rotations, kmeans, reassign_pseudolabels, sobel_preprocess
from .nets import BackboneConfig, build_backbone, build_head, reinit_head
from .trainer import OptimConfig, PretrainConfig, multitask_epoch_avg, pretrain, sequential_schedule
from .dg import DGConfig, cross_domain, erm_finetune, irm_finetune, leave_one_out_sweep
from .explain import gradcam, render_overlay
from .data import DomainDataset, load_domain_tree, synth_domains

__all__ = [
    "BackboneConfig", "ConfigError", "DGConfig", "DataError", "DomainDataset", "GaborBankConfig",
    "NumericalError", "OptimConfig", "PretrainConfig", "SSDGError", "ShapeError", "build_backbone",
    "build_gabor_bank", "build_head", "cross_domain", "erm_finetune", "expand_rotations", "gradcam",
    "irm_finetune", "kmeans", "leave_one_out_sweep", "load_domain_tree", "make_target",
    "multitask_epoch_avg", "pretrain", "reassign_pseudolabels", "reconstruction_loss", "reinit_head",
    "render_overlay", "sequential_schedule", "sobel_preprocess", "synth_domains",
]
