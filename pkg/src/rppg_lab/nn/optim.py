"""AdamW with decoupled weight decay, the linear-scaled warmup+cosine
schedule, and layer-wise learning-rate decay for fine-tuning."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NanGradientError
from .tensor import Tensor

ADAM_EPS = 1e-8


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    base_lr: float = 0.001
    layer_decay: float = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    state: OptimState,
    lr: float,
    lr_multipliers: dict[str, float] | None = None,
    decay_flags: dict[str, bool] | None = None,
) -> None:
    """One AdamW update over named parameters, in place.

    Decoupled weight decay is applied first (param -= lr*wd*param), then
    the bias-corrected moment update param -= lr * m_hat/(sqrt(v_hat)+eps).
    A non-finite gradient aborts the whole step before any mutation.
    """
    if lr < 0:
        raise ConfigError("lr must be >= 0")
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NanGradientError(name)
        grads[name] = g

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        mult = 1.0 if lr_multipliers is None else lr_multipliers.get(name, 1.0)
        eff_lr = lr * mult
        decay = True if decay_flags is None else decay_flags.get(name, True)
        if decay and state.weight_decay:
            p.data -= (eff_lr * state.weight_decay * p.data).astype(p.data.dtype)
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.data -= (eff_lr * update).astype(p.data.dtype)


def lr_at(epoch: float, base_lr: float, batch_size: int, warmup_epochs: float, total_epochs: float) -> float:
    """Linear-scaled peak (base_lr * batch/256), linear warmup, then
    half-cosine decay to 0 at total_epochs."""
    if epoch < 0 or epoch > total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    peak = base_lr * batch_size / 256.0
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return peak * epoch / warmup_epochs
    if total_epochs == warmup_epochs:
        return peak
    frac = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return 0.5 * peak * (1.0 + math.cos(math.pi * frac))


def layerwise_lr_multipliers(depth: int, layer_decay: float = 0.75) -> np.ndarray:
    """Multiplier for layer i (0 = embedding, depth = head): layer_decay^(depth-i)."""
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    return np.array([layer_decay ** (depth - i) for i in range(depth + 1)])


def default_decay_flags(params: dict[str, Tensor]) -> dict[str, bool]:
    """Weight decay only on matrices: biases, norm gains and tokens exempt."""
    return {name: p.data.ndim >= 2 and not name.endswith("token") for name, p in params.items()}


def encoder_layer_ids(names, depth: int) -> dict[str, int]:
    """Map parameter names to layer-decay indices: embedding/tokens = 0,
    encoder block b = b+1, everything after the trunk = depth+1."""
    ids = {}
    for name in names:
        if name.startswith("encoder.blocks."):
            ids[name] = int(name.split(".")[2]) + 1
        elif name.startswith(("encoder.patch_embed", "encoder.cls_token")):
            ids[name] = 0
        else:  # final norm and head
            ids[name] = depth + 1
    return ids
