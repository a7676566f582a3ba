"""Transformation-equivariant representation learning.

Library + CLI: a from-scratch reverse-mode autodiff engine, projective
transformation sampling and warping, a probabilistic Siamese encoder with
a Gaussian transformation decoder, SGD training, and probe evaluation of
the learned representations.
"""

from .autodiff import Tensor, grad_check, no_grad
from .checkpoint import ModelState, load_checkpoint, save_checkpoint
from .model import AvtModel, avt_loss, gaussian_nll, mi_lower_bound_estimate, reparameterize
from .optim import Sgd, SgdConfig, lr_schedule, sgd_step
from .transforms import (Homography, TargetCodec, TransformParams, TransformPrior,
                         codec_for, dlt_solve, sample_transform, warp_image)

__version__ = "0.1.0"

__all__ = [
    "AvtModel", "Homography", "ModelState", "Sgd", "SgdConfig", "TargetCodec",
    "Tensor", "TransformParams", "TransformPrior", "avt_loss", "codec_for",
    "dlt_solve", "gaussian_nll", "grad_check", "load_checkpoint", "lr_schedule",
    "mi_lower_bound_estimate", "no_grad", "reparameterize", "sample_transform",
    "save_checkpoint", "sgd_step", "warp_image", "__version__",
]
