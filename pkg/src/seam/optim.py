"""SGD with Nesterov momentum and per-group settings; cosine schedule with warmup."""
import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np


@dataclass
class OptimizerState:
    """Momentum buffers keyed by parameter name plus per-group hyperparameters.

    ``groups`` maps a parameter group to ``{"lr_mult", "momentum", "weight_decay"}``;
    groups not listed fall back to ``default``.
    """

    default: Dict[str, float] = field(default_factory=lambda: {"lr_mult": 1.0, "momentum": 0.9, "weight_decay": 0.0})
    groups: Dict[str, Dict[str, float]] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def settings(self, group):
        out = dict(self.default)
        out.update(self.groups.get(group, {}))
        return out


def make_state(momentum=0.9, weight_decay=0.0, logit_lr_mult=1.0):
    """Weight decay only on model weights; bit logits, GM head and steps are exempt."""
    return OptimizerState(
        default={"lr_mult": 1.0, "momentum": momentum, "weight_decay": 0.0},
        groups={
            "model-weight": {"weight_decay": weight_decay},
            "bit-logit": {"lr_mult": logit_lr_mult},
        },
    )


def sgd_nesterov_step(params, state: OptimizerState, lr):
    """In-place Nesterov update: ``b = mu*b + g; p -= lr*(g + mu*b)``.

    Weight decay is added to the gradient before the momentum update.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
        s = state.settings(p.group)
        g = p.grad
        if s["weight_decay"]:
            g = g + s["weight_decay"] * p.data
        mu = s["momentum"]
        buf = state.buffers.get(p.name)
        if buf is None:
            buf = state.buffers[p.name] = np.array(g, dtype=p.data.dtype, copy=True)
        else:
            buf *= mu
            buf += g
        step = g + mu * buf if mu else g
        p.data -= (lr * s["lr_mult"]) * step.astype(p.data.dtype, copy=False)


def cosine_lr(epoch, total_epochs, warmup_epochs, base_lr):
    """Linear warmup from 0, then half-cosine decay. ``epoch`` may be fractional."""
    if warmup_epochs and epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    t = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
