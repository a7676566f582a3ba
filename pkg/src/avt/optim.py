"""SGD with momentum, selective weight decay, and the warmup/hold/decay
learning-rate schedule.

Schedule shape: linear ramp base_lr -> peak_lr over the warmup epochs, a
constant peak, then geometric decay reaching final_lr at the last epoch.
The reference waypoints (peak after the first ~1.1% of epochs, decay from
~2/3 of epochs) are expressed as fractions so short runs rescale
proportionally; see default_schedule_epochs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Param

# Waypoints of the reference schedule, as fractions of the total run.
WARMUP_FRACTION = 50.0 / 4500.0
DECAY_START_FRACTION = 3000.0 / 4500.0


class NonFiniteGradientError(FloatingPointError):
    """A parameter gradient contains NaN/Inf; the step is rejected."""


@dataclass(frozen=True)
class SgdConfig:
    base_lr: float = 1e-3
    peak_lr: float = 5e-3
    final_lr: float = 1e-5
    warmup_epochs: int = 1
    decay_start_epoch: int = 20
    total_epochs: int = 30
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if not (0.0 < self.final_lr <= self.base_lr <= self.peak_lr):
            raise ValueError(f"learning rates must satisfy 0 < final {self.final_lr} "
                             f"<= base {self.base_lr} <= peak {self.peak_lr}")
        if not (self.warmup_epochs < self.decay_start_epoch < self.total_epochs):
            raise ValueError(f"epochs must satisfy warmup {self.warmup_epochs} < "
                             f"decay_start {self.decay_start_epoch} < total {self.total_epochs}")


def default_schedule_epochs(total_epochs: int) -> tuple[int, int]:
    """(warmup_epochs, decay_start_epoch) rescaled from the reference fractions."""
    warmup = max(1, round(total_epochs * WARMUP_FRACTION))
    decay_start = max(warmup + 1, round(total_epochs * DECAY_START_FRACTION))
    decay_start = min(decay_start, total_epochs - 1)
    return warmup, decay_start


def lr_schedule(epoch: int, cfg: SgdConfig) -> float:
    """Learning rate for an integer epoch index in [0, total_epochs)."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch <= cfg.warmup_epochs:
        if cfg.warmup_epochs == 0:
            return cfg.peak_lr
        frac = epoch / cfg.warmup_epochs
        return cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * frac
    if epoch < cfg.decay_start_epoch:
        return cfg.peak_lr
    last = cfg.total_epochs - 1
    if last == cfg.decay_start_epoch:
        return cfg.final_lr
    frac = (epoch - cfg.decay_start_epoch) / (last - cfg.decay_start_epoch)
    return float(cfg.peak_lr * (cfg.final_lr / cfg.peak_lr) ** frac)


def sgd_step(value: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float) -> None:
    """One in-place heavy-ball step: v <- m v + (g + wd w); w <- w - lr v."""
    if value.shape != grad.shape or value.shape != velocity.shape:
        raise ValueError(f"sgd_step shapes disagree: value {value.shape}, "
                         f"grad {grad.shape}, velocity {velocity.shape}")
    if not np.isfinite(grad).all():
        raise NonFiniteGradientError("gradient contains non-finite values")
    g = grad if weight_decay == 0.0 else grad + weight_decay * value
    velocity *= momentum
    velocity += g
    value -= lr * velocity


class Sgd:
    """Momentum-SGD over a parameter list; weight decay applies only to
    parameters flagged decay=True (conv/dense weights)."""

    def __init__(self, params: list[Param], cfg: SgdConfig):
        self.params = params
        self.cfg = cfg
        self.velocities = {p.name: np.zeros_like(p.tensor.data) for p in params}

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.tensor.grad is None:
                raise NonFiniteGradientError(f"parameter {p.name} has no gradient; "
                                             "was backward() run?")
            wd = self.cfg.weight_decay if p.decay else 0.0
            try:
                sgd_step(p.tensor.data, p.tensor.grad, self.velocities[p.name],
                         lr, self.cfg.momentum, wd)
            except NonFiniteGradientError as exc:
                raise NonFiniteGradientError(f"non-finite gradient for {p.name}") from exc

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"momentum/{name}": buf for name, buf in self.velocities.items()}

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for name in self.velocities:
            key = f"momentum/{name}"
            if key not in buffers:
                raise KeyError(f"checkpoint is missing optimizer buffer {key}")
            if buffers[key].shape != self.velocities[name].shape:
                raise ValueError(f"optimizer buffer {key} has shape {buffers[key].shape}, "
                                 f"expected {self.velocities[name].shape}")
            self.velocities[name] = buffers[key].astype(self.velocities[name].dtype)
