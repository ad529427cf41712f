"""Choosing which samples in a minibatch get the expensive perturbation.

Two informed scoring rules are implemented next to the trivial ones:

* margin: samples whose correct-class logit barely beats the runner-up get
  weight 1/(|margin| + eps), so near-boundary points are attacked most often.
* grad_match: samples whose individual parameter gradient points along the
  batch mean gradient get weight max(cosine, 0); anti-aligned samples are
  never picked unless every weight vanishes.

Weights are normalized into a distribution and a subset of size
round(rho * B) is drawn without replacement. For the first warmup_epochs
epochs the distribution is uniform regardless of strategy, because early
margins and gradients are noise. Degenerate weight vectors (all zero, or
non-finite) fall back to uniform with a logged warning rather than aborting
a training run.

Everything here is a pure function of its inputs plus an explicit rng;
model access is limited to per_sample_gradients, which callers run before
select() and pass in through BatchState.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DegenerateWeightsError, ShapeError

log = logging.getLogger(__name__)

STRATEGIES = ("none", "full", "random", "margin", "grad_match")


@dataclass
class SelectionConfig:
    strategy: str = "margin"
    rho: float = 0.25
    warmup_epochs: int = 2
    eps_stab: float = 1e-8
    delta_stab: float = 1e-12
    grad_scope: str = "final_linear"
    replacement: bool = False

    def validated(self) -> "SelectionConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}, options: {', '.join(STRATEGIES)}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must be in (0, 1], got {self.rho}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.eps_stab <= 0 or self.delta_stab <= 0:
            raise ConfigError("stability constants must be positive")
        return self


@dataclass
class BatchState:
    """Per-batch inputs a strategy may need, computed by the caller."""
    labels: np.ndarray
    logits: np.ndarray | None = None
    gradients: np.ndarray | None = None


@dataclass
class SelectionDecision:
    epoch: int
    strategy_used: str
    weights: np.ndarray
    probs: np.ndarray
    chosen: np.ndarray
    fallback: bool = field(default=False)


def subset_size(rho: float, batch: int) -> int:
    """round(rho * batch) with ties rounding up, clamped to [1, batch]."""
    if batch < 1:
        raise ContractError(f"batch must be >= 1, got {batch}")
    k = int(np.floor(rho * batch + 0.5))
    return min(max(k, 1), batch)


def logit_margin(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Correct-class logit minus the best competing logit, per sample.

    The competing max is taken after masking out the correct entry, so a
    tied runner-up gives margin 0 and a misclassified sample goes negative.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {logits.shape}")
    B, C = logits.shape
    if C < 2:
        raise ConfigError(f"margin needs at least 2 classes, got {C}")
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= C:
        raise ContractError(f"labels out of range for {C} classes")
    rows = np.arange(B)
    correct = logits[rows, labels]
    masked = logits.copy()
    masked[rows, labels] = -np.inf
    return correct - masked.max(axis=1)


def margin_weights(margins: np.ndarray, eps_stab: float = 1e-8) -> np.ndarray:
    return 1.0 / (np.abs(np.asarray(margins, dtype=np.float64)) + eps_stab)


def normalize_to_probs(weights: np.ndarray) -> np.ndarray:
    """Scale non-negative weights to sum to one; degenerate vectors raise."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ShapeError(f"weights must be a non-empty vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise DegenerateWeightsError("weights contain nan or inf")
    if np.any(w < 0):
        raise DegenerateWeightsError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise DegenerateWeightsError("weights sum to zero")
    return w / total


def per_sample_gradients(model, x: np.ndarray, y: np.ndarray, grad_scope: str = "final_linear") -> np.ndarray:
    """Flattened parameter gradient of each sample's own cross-entropy.

    Runs one forward/backward per sample, so cost scales with batch size.
    Leaves model grads dirty; callers re-zero before their own backward.
    """
    if grad_scope not in model.param_scopes:
        raise ConfigError(
            f"model has no parameter scope {grad_scope!r}, options: {', '.join(model.param_scopes)}")
    names = model.param_scopes[grad_scope]
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] < 1:
        raise ContractError("need at least one sample")
    rows = []
    for i in range(x.shape[0]):
        model.zero_grads()
        loss = ad.cross_entropy_with_logits(model.logits(Tensor(x[i:i + 1])), y[i:i + 1])
        ad.backward(loss)
        rows.append(np.concatenate([model.params[n].grad.ravel().astype(np.float64) for n in names]))
    return np.stack(rows)


def batch_gradient(per_sample: np.ndarray) -> np.ndarray:
    G = np.asarray(per_sample, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] < 1:
        raise ContractError(f"need a non-empty stack of equal-length vectors, got shape {G.shape}")
    return G.mean(axis=0)


def cosine_alignment(g: np.ndarray, g_full: np.ndarray, delta_stab: float = 1e-12):
    """Cosine similarity with g_full, stabilized inside the denominator product.

    Accepts a single vector (returns a scalar) or a stack of row vectors
    (returns one similarity per row).
    """
    G = np.asarray(g, dtype=np.float64)
    ref = np.asarray(g_full, dtype=np.float64)
    single = G.ndim == 1
    if single:
        G = G[None, :]
    if G.ndim != 2 or ref.shape != (G.shape[1],):
        raise ShapeError(f"shape mismatch: vectors {np.asarray(g).shape}, reference {ref.shape}")
    sims = (G @ ref) / (np.linalg.norm(G, axis=1) * np.linalg.norm(ref) + delta_stab)
    return float(sims[0]) if single else sims


def threshold_weights(sims: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(sims, dtype=np.float64), 0.0)


def sample_subset(probs: np.ndarray, k: int, rng, replacement: bool = False) -> np.ndarray:
    """Draw k indices from a distribution, one searchsorted draw at a time.

    Without replacement each draw removes its index and renormalizes the
    rest. Zero-probability entries are only ever used if the positive mass
    runs out before k draws, at which point the leftovers are drawn
    uniformly. Indices come back in draw order.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ShapeError(f"probs must be a non-empty vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ContractError("probs must be finite and non-negative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ContractError(f"probs must sum to 1, got {p.sum()!r}")
    n = p.size
    k = int(k)
    if k < 0 or (not replacement and k > n):
        raise ContractError(f"cannot draw {k} distinct indices from {n} entries")

    def draw(weights):
        cum = np.cumsum(weights / weights.sum())
        j = int(np.searchsorted(cum, rng.random(), side="right"))
        j = min(j, n - 1)
        while weights[j] <= 0:
            j -= 1
        return j

    if replacement:
        return np.array([draw(p) for _ in range(k)], dtype=np.int64)

    avail = p.copy()
    taken = np.zeros(n, dtype=bool)
    out = np.empty(k, dtype=np.int64)
    for t in range(k):
        if avail.sum() <= 0:
            avail = (~taken).astype(np.float64)
        j = draw(avail)
        out[t] = j
        avail[j] = 0.0
        taken[j] = True
    return out


def select(strategy: str, state: BatchState, cfg: SelectionConfig, epoch: int, rng) -> SelectionDecision:
    """Decide which rows of the batch get attacked.

    Precedence: none/full short-circuit; then the warmup rule replaces any
    sampling strategy with uniform; then the strategy's own weights apply.
    """
    cfg.validated()
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}, options: {', '.join(STRATEGIES)}")
    B = int(np.asarray(state.labels).shape[0])
    if B < 1:
        raise ContractError("empty batch")
    ones = np.ones(B)
    uniform = ones / B
    if strategy == "none":
        return SelectionDecision(epoch, "none", ones, uniform, np.empty(0, dtype=np.int64))
    if strategy == "full":
        return SelectionDecision(epoch, "full", ones, uniform, np.arange(B, dtype=np.int64))

    k = subset_size(cfg.rho, B)
    if epoch < cfg.warmup_epochs or strategy == "random":
        used = "random" if strategy == "random" else "uniform-warmup"
        return SelectionDecision(epoch, used, ones, uniform,
                                 sample_subset(uniform, k, rng, cfg.replacement))

    if strategy == "margin":
        if state.logits is None:
            raise ConfigError("margin strategy needs logits in the batch state")
        weights = margin_weights(logit_margin(state.logits, state.labels), cfg.eps_stab)
    else:
        if state.gradients is None:
            raise ConfigError("grad_match strategy needs per-sample gradients in the batch state")
        G = state.gradients
        weights = threshold_weights(cosine_alignment(G, batch_gradient(G), cfg.delta_stab))

    fallback = False
    try:
        probs = normalize_to_probs(weights)
    except DegenerateWeightsError as exc:
        log.warning("selection weights degenerate (%s); falling back to uniform", exc)
        probs = uniform
        fallback = True
    return SelectionDecision(epoch, strategy, weights, probs,
                             sample_subset(probs, k, rng, cfg.replacement), fallback)
