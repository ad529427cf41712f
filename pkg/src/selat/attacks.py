"""Bounded input perturbations: FGSM and iterated sign-gradient ascent (PGD).

All attacks operate in the max-norm ball of radius eps around the clean
input, intersected with the valid pixel range. Model parameters are frozen
for the duration of an attack so parameter gradients from attack backprops
can never leak into the training step. A counter tracks how many
forward/backward passes the attacks spend, in units of (samples x steps).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass
class AttackConfig:
    eps: float = 8.0 / 255.0
    alpha: float = 2.0 / 255.0
    steps: int = 10
    random_start: bool = True
    clip_min: float = 0.0
    clip_max: float = 1.0

    def validated(self) -> "AttackConfig":
        if self.eps < 0:
            raise ConfigError(f"eps must be >= 0, got {self.eps}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.clip_min >= self.clip_max:
            raise ConfigError(f"need clip_min < clip_max, got [{self.clip_min}, {self.clip_max}]")
        return self


class AttackCounter:
    """Accumulates attack cost as sample-steps (one unit = one sample through one PGD step)."""

    def __init__(self):
        self.passes = 0

    def add(self, samples: int, steps: int):
        self.passes += int(samples) * int(steps)


@contextlib.contextmanager
def frozen(model):
    """Disable parameter gradients while crafting perturbations."""
    saved = {k: p.requires_grad for k, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False
    try:
        yield model
    finally:
        for k, p in model.params.items():
            p.requires_grad = saved[k]


def project_linf(x_adv: np.ndarray, x: np.ndarray, eps: float, clip_min=0.0, clip_max=1.0) -> np.ndarray:
    """Project onto the eps-ball around x intersected with [clip_min, clip_max]."""
    out = np.clip(x_adv, x - eps, x + eps)
    return np.clip(out, clip_min, clip_max)


def input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy at (x, y) with respect to x."""
    xt = Tensor(np.array(x, dtype=ad.get_default_dtype()), requires_grad=True)
    with frozen(model):
        loss = ad.cross_entropy_with_logits(model.logits(xt), y)
        ad.backward(loss)
    return xt.grad


def fgsm(model, x: np.ndarray, y: np.ndarray, epsilon: float, clip_min=0.0, clip_max=1.0,
         counter: AttackCounter | None = None) -> np.ndarray:
    """Single sign-gradient step of size epsilon from the clean input."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    x = np.asarray(x, dtype=ad.get_default_dtype())
    g = input_gradient(model, x, y)
    x_adv = x + epsilon * np.sign(g)
    if counter is not None:
        counter.add(x.shape[0], 1)
    return project_linf(x_adv, x, epsilon, clip_min, clip_max)


def pgd(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, rng=None,
        counter: AttackCounter | None = None) -> np.ndarray:
    """Iterated sign-gradient ascent, projected onto the eps-ball each step."""
    cfg.validated()
    x = np.asarray(x, dtype=ad.get_default_dtype())
    if x.shape[0] != np.asarray(y).shape[0]:
        raise ShapeError(f"batch sizes differ: inputs {x.shape[0]}, labels {np.asarray(y).shape[0]}")
    if cfg.random_start:
        if rng is None:
            raise ConfigError("random_start attack needs an rng")
        delta = rng.uniform(-cfg.eps, cfg.eps, size=x.shape).astype(x.dtype)
        x_adv = project_linf(x + delta, x, cfg.eps, cfg.clip_min, cfg.clip_max)
    else:
        x_adv = x.copy()
    for _ in range(cfg.steps):
        g = input_gradient(model, x_adv, y)
        x_adv = project_linf(x_adv + cfg.alpha * np.sign(g), x, cfg.eps, cfg.clip_min, cfg.clip_max)
    if counter is not None:
        counter.add(x.shape[0], cfg.steps)
    return x_adv.astype(x.dtype)


def attack_subset(model, x: np.ndarray, y: np.ndarray, idx: np.ndarray, cfg: AttackConfig,
                  rng=None, counter: AttackCounter | None = None) -> np.ndarray:
    """Perturb only the rows named by idx; everybody else keeps their clean input.

    Returns a full-size batch. idx must hold unique positions in range.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"index array must be 1-D, got shape {idx.shape}")
    if idx.size == 0:
        return np.array(x, dtype=ad.get_default_dtype())
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise ShapeError(f"attack indices out of range for batch of {x.shape[0]}")
    if np.unique(idx).size != idx.size:
        raise ShapeError("attack indices must be unique")
    out = np.array(x, dtype=ad.get_default_dtype())
    out[idx] = pgd(model, out[idx], np.asarray(y)[idx], cfg, rng=rng, counter=counter)
    return out
