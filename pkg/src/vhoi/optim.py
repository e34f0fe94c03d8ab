"""SGD with momentum, step-decay schedule, and finite-difference checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Parameter, Tensor


@dataclass
class TrainConfig:
    base_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-7
    epochs: int = 20
    decay_epochs: tuple[int, ...] = (10, 15)
    decay_factor: float = 0.1
    seed: int = 0
    batch_size: int = 16

    def __post_init__(self) -> None:
        if self.base_lr <= 0 or self.decay_factor <= 0:
            raise ValueError("learning rates and decay factor must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        bad = [e for e in self.decay_epochs if not 1 <= e <= self.epochs]
        if bad:
            raise ValueError(f"decay epochs {bad} outside [1, {self.epochs}]")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step-decay schedule: the rate drops by ``decay_factor`` at each decay epoch."""
    drops = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.base_lr * cfg.decay_factor**drops


def sgd_step(params: Sequence[Parameter], cfg: TrainConfig, epoch: int) -> None:
    """In-place momentum update: v <- m*v + g + wd*w; w <- w - lr*v."""
    lr = learning_rate(cfg, epoch)
    for p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")
        p.momentum_buf *= cfg.momentum
        p.momentum_buf += g + cfg.weight_decay * p.data
        p.data -= lr * p.momentum_buf


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a list of tensors to one output tensor; the output is
    scalarized against a fixed random projection so a single backward pass
    yields the full analytic Jacobian-vector product.
    """
    rng = np.random.default_rng(20240117)
    tensors = [Tensor(np.array(x, dtype=np.float64), needs_grad=True) for x in inputs]
    out = fn(tensors)
    proj = rng.standard_normal(out.shape)

    def scalarize(ts: Sequence[Tensor]) -> float:
        return float(np.sum(fn(ts).data * proj))

    loss = Tensor(
        np.sum(out.data * proj),
        (out,),
        lambda g: out.accumulate_grad(g * proj),
    )
    loss.backward()

    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = scalarize(tensors)
            flat[j] = orig - eps
            lo = scalarize(tensors)
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[j]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
