"""Pixel world model with global (difference) and local (window) sequence branches."""

from .distributions import (
    LatentDist,
    kl_categorical,
    make_bins,
    symexp,
    symlog,
    twohot_cross_entropy,
    twohot_encode,
    twohot_expectation,
)
from .losses import (
    LossReport,
    continuation_loss,
    free_bits,
    loss_dyn_rep,
    loss_pred,
    loss_var,
    reconstruction_loss,
    reward_loss,
    total_loss,
    variation_target,
    world_model_loss,
)
from .model import ConvDecoder, ConvEncoder, GlamModel, ModelContext, WorldModelOutputs
