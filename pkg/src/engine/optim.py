import logging
from dataclasses import dataclass, field

import numpy as np

from src.utils.errors import OptimizerError

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name."""
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    weight_decay: float = 0.0
    grad_clip: float = None
    first_moments: dict = field(default_factory=dict)
    second_moments: dict = field(default_factory=dict)


def _clip_gradients(params, max_norm):
    total = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total


def adam_step(params, state):
    """One bias-corrected Adam update, in place on ``param.data``."""
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise OptimizerError(f"parameters without gradients: {', '.join(missing[:5])}"
                             + (" ..." if len(missing) > 5 else ''), missing=missing)
    if state.grad_clip:
        _clip_gradients(params, state.grad_clip)
    beta1, beta2 = state.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for p in params:
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.first_moments.get(p.name)
        v = state.second_moments.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise OptimizerError(f"moment shape {m.shape} does not match parameter {p.name} {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.first_moments[p.name] = m.astype(p.data.dtype)
        state.second_moments[p.name] = v.astype(p.data.dtype)
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        if p.trainable_mask is not None:
            update = np.where(p.trainable_mask, update, 0.0)
        p.data -= update.astype(p.data.dtype)


class StepDecay:
    """Learning rate divided by ``factor`` once ``decay_epoch`` is reached."""

    def __init__(self, base_lr, decay_epoch, factor=10.0):
        self.base_lr = base_lr
        self.decay_epoch = decay_epoch
        self.factor = factor

    def lr_at(self, epoch):
        if self.decay_epoch is not None and epoch >= self.decay_epoch:
            return self.base_lr / self.factor
        return self.base_lr


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, grad_clip=None):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise OptimizerError("parameter names must be unique")
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps,
                                    weight_decay=weight_decay, grad_clip=grad_clip)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, self.state)

    def set_lr(self, lr):
        if lr != self.state.lr:
            logger.info("Learning rate %.3g -> %.3g", self.state.lr, lr)
        self.state.lr = lr
