from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    DecoderConfig,
    EncoderConfig,
    LinearProbe,
    MaskedAutoencoder,
    RppgRegressor,
    desk_profile,
    paper_profile,
)
from .optim import OptimState, adamw_step, layerwise_lr_multipliers, lr_at
from .tensor import Tensor

__all__ = [
    "DecoderConfig",
    "EncoderConfig",
    "LinearProbe",
    "MaskedAutoencoder",
    "OptimState",
    "RppgRegressor",
    "Tensor",
    "adamw_step",
    "desk_profile",
    "layerwise_lr_multipliers",
    "load_checkpoint",
    "lr_at",
    "paper_profile",
    "save_checkpoint",
]
