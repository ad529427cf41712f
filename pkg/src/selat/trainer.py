"""The selective training loop: select, perturb a subset, descend a mixed loss.

Per batch: one recorded clean forward (shared by selection and the clean
loss term), optional per-sample gradients for the alignment strategy, subset
selection, multi-step perturbation of the chosen rows only, then a single
backward through

    L = mean_{i in S} CE(f(x_adv_i), y_i) + lambda * mean_{i in B} CE(f(x_i), y_i)

followed by an SGD-momentum step. Perturbed inputs enter the loss as
constants; no gradient ever flows back into the attack iterates. The clean
term always covers the whole batch, including the attacked rows.

Five methods share the loop and differ only in selection strategy:
clean (S empty), full_pgd (S = batch), random_subset, margin, grad_match.
Attack compute is metered in sample-steps so equal-budget comparisons are
exact rather than wall-clock guesses.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, AttackCounter, pgd
from .autodiff import Tensor
from .data import Dataset, batches
from .errors import ConfigError, ContractError, ShapeError
from .evaluation import clean_accuracy, robust_accuracy
from .models import Model, save_model
from .selection import BatchState, SelectionConfig, per_sample_gradients, select

log = logging.getLogger(__name__)

METHODS = ("clean", "full_pgd", "random_subset", "margin", "grad_match")

METHOD_STRATEGY = {
    "clean": "none",
    "full_pgd": "full",
    "random_subset": "random",
    "margin": "margin",
    "grad_match": "grad_match",
}

CSV_HEADER = "epoch,clean_loss,adv_loss,clean_acc,robust_acc,attack_passes_cum,seconds"


@dataclass
class TrainConfig:
    method: str = "margin"
    attack: AttackConfig = field(default_factory=AttackConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    lam: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    lr_schedule: str = "constant"
    eval_every: int = 1
    robust_eval_every: int = 0
    eval_steps: int = 40

    def validated(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}, options: {', '.join(METHODS)}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.method == "clean" and self.lam == 0:
            raise ConfigError("method=clean with lambda=0 has no learning signal")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "step"):
            raise ConfigError(f"lr_schedule must be constant or step, got {self.lr_schedule!r}")
        if self.eval_steps < 1:
            raise ConfigError(f"eval_steps must be >= 1, got {self.eval_steps}")
        self.attack.validated()
        self.selection.validated()
        return self


@dataclass
class EpochMetrics:
    epoch: int
    clean_loss: float
    adv_loss: float
    clean_acc: float
    robust_acc: float
    attack_passes_cum: int
    seconds: float


@dataclass
class TrainRecord:
    method: str
    epochs: list
    checkpoint_path: str
    csv_path: str
    manifest_path: str
    attack_passes: int
    seconds: float


def effective_lr(cfg: TrainConfig, epoch: int) -> float:
    """Constant, or x0.1 at 50% and again at 75% of the epoch budget."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    lr = cfg.lr
    if epoch >= cfg.epochs // 2:
        lr *= 0.1
    if epoch >= (3 * cfg.epochs) // 4:
        lr *= 0.1
    return lr


def sgd_momentum_step(params, grads, state, lr, momentum, weight_decay=0.0):
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v. In place."""
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"no gradient supplied for parameter {name!r}")
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name!r}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + (g + weight_decay * p.data)
        p.data = p.data - lr * v
        state[name] = v
    return state


def mixed_loss(model, x, y, chosen, x_adv_rows, lam, clean_logits=None):
    """Subset adversarial CE plus lambda times full-batch clean CE.

    x_adv_rows holds exactly the attacked rows, aligned with chosen. Pass a
    recorded clean_logits tensor to reuse the selection-time forward.
    Returns (loss tensor, clean CE value, adversarial CE value or nan).
    """
    x = np.asarray(x, dtype=ad.get_default_dtype())
    B = x.shape[0]
    if clean_logits is None:
        clean_logits = model.logits(Tensor(x))
    if clean_logits.shape[0] != B:
        raise ContractError(f"clean term covers {clean_logits.shape[0]} samples, batch has {B}")
    clean_ce = ad.cross_entropy_with_logits(clean_logits, y)
    chosen = np.asarray(chosen, dtype=np.int64)
    if chosen.size == 0:
        return ad.scale(clean_ce, lam), float(clean_ce.data), float("nan")
    x_adv_rows = np.asarray(x_adv_rows, dtype=ad.get_default_dtype())
    if x_adv_rows.shape[0] != chosen.size:
        raise ContractError(f"{x_adv_rows.shape[0]} attacked rows for {chosen.size} chosen indices")
    adv_ce = ad.cross_entropy_with_logits(model.logits(Tensor(x_adv_rows)), np.asarray(y)[chosen])
    return ad.add(adv_ce, ad.scale(clean_ce, lam)), float(clean_ce.data), float(adv_ce.data)


def train_epoch(model, data_iter, cfg: TrainConfig, epoch, opt_state, sel_rng, atk_rng, counter):
    """One pass over the batches; returns (mean clean CE, mean adv CE)."""
    strategy = METHOD_STRATEGY[cfg.method]
    lr = effective_lr(cfg, epoch)
    dtype = ad.get_default_dtype()
    clean_sum = 0.0
    clean_n = 0
    adv_sum = 0.0
    adv_n = 0
    for xb, yb in data_iter:
        xb = np.asarray(xb, dtype=dtype)
        clean_logits = model.logits(Tensor(xb))
        grads = None
        if strategy == "grad_match" and epoch >= cfg.selection.warmup_epochs:
            grads = per_sample_gradients(model, xb, yb, cfg.selection.grad_scope)
        decision = select(strategy, BatchState(yb, clean_logits.data, grads),
                          cfg.selection, epoch, sel_rng)
        x_adv = None
        if decision.chosen.size:
            x_adv = pgd(model, xb[decision.chosen], yb[decision.chosen], cfg.attack,
                        rng=atk_rng, counter=counter)
        model.zero_grads()
        loss, clean_ce, adv_ce = mixed_loss(model, xb, yb, decision.chosen, x_adv,
                                            cfg.lam, clean_logits)
        ad.backward(loss)
        param_grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                       for k, p in model.params.items()}
        sgd_momentum_step(model.params, param_grads, opt_state, lr, cfg.momentum, cfg.weight_decay)
        B = xb.shape[0]
        clean_sum += clean_ce * B
        clean_n += B
        if decision.chosen.size:
            adv_sum += adv_ce * decision.chosen.size
            adv_n += decision.chosen.size
    return clean_sum / clean_n, (adv_sum / adv_n) if adv_n else float("nan")


def _due(every: int, epoch: int, last: int) -> bool:
    # every: -1 never, 0 final epoch only, n>0 every n epochs plus final
    if every < 0:
        return False
    if epoch == last:
        return True
    return every > 0 and (epoch + 1) % every == 0


def train(model: Model, train_ds: Dataset, cfg: TrainConfig, out_dir,
          eval_ds: Dataset | None = None, manifest_config: dict | None = None) -> TrainRecord:
    """Run the full schedule; write checkpoint, metrics CSV, and manifest.

    Deterministic in cfg.seed: data order, selection draws, and attack
    starts come from seed-derived streams that evaluation never touches.
    """
    cfg.validated()
    os.makedirs(out_dir, exist_ok=True)
    sel_ss, atk_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    sel_rng = np.random.default_rng(sel_ss)
    atk_rng = np.random.default_rng(atk_ss)
    counter = AttackCounter()
    opt_state: dict = {}
    eval_attack = AttackConfig(eps=cfg.attack.eps, alpha=cfg.attack.alpha,
                               steps=cfg.eval_steps, random_start=True,
                               clip_min=cfg.attack.clip_min, clip_max=cfg.attack.clip_max)
    rows = []
    last = cfg.epochs - 1
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        data_iter = batches(train_ds, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch)
        clean_loss, adv_loss = train_epoch(model, data_iter, cfg, epoch, opt_state,
                                           sel_rng, atk_rng, counter)
        seconds = time.perf_counter() - t0
        clean_acc = robust_acc = float("nan")
        if eval_ds is not None and _due(cfg.eval_every, epoch, last):
            clean_acc = clean_accuracy(model, eval_ds, cfg.batch_size)
        if eval_ds is not None and _due(cfg.robust_eval_every, epoch, last):
            robust_acc = robust_accuracy(model, eval_ds, eval_attack, cfg.batch_size, seed=0)
        rows.append(EpochMetrics(epoch, clean_loss, adv_loss, clean_acc, robust_acc,
                                 counter.passes, seconds))
        log.info("[%s] epoch %d/%d clean_loss=%.4f adv_loss=%.4f clean_acc=%.2f "
                 "robust_acc=%.2f passes=%d %.1fs", cfg.method, epoch + 1, cfg.epochs,
                 clean_loss, adv_loss, clean_acc, robust_acc, counter.passes, seconds)
    checkpoint = os.path.join(out_dir, "model.ckpt")
    save_model(model, checkpoint)
    csv_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(csv_path, rows)
    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest = {
        "config": manifest_config if manifest_config is not None else config_to_flat(cfg),
        "model": model.name,
        "dataset_digest": {"train": train_ds.digest(),
                           "eval": eval_ds.digest() if eval_ds is not None else None},
    }
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return TrainRecord(cfg.method, rows, checkpoint, csv_path, manifest_path,
                       counter.passes, sum(r.seconds for r in rows))


def config_to_flat(cfg: TrainConfig) -> dict:
    """TrainConfig as the flat key space the config file format uses."""
    return {
        "method": cfg.method,
        "lambda": cfg.lam,
        "lr": cfg.lr,
        "momentum": cfg.momentum,
        "weight_decay": cfg.weight_decay,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "lr_schedule": cfg.lr_schedule,
        "eval_every": cfg.eval_every,
        "robust_eval_every": cfg.robust_eval_every,
        "eval_steps": cfg.eval_steps,
        "attack.epsilon": cfg.attack.eps,
        "attack.alpha": cfg.attack.alpha,
        "attack.steps": cfg.attack.steps,
        "attack.random_start": cfg.attack.random_start,
        "selection.rho": cfg.selection.rho,
        "selection.warmup_epochs": cfg.selection.warmup_epochs,
        "selection.eps_stab": cfg.selection.eps_stab,
        "selection.delta_stab": cfg.selection.delta_stab,
        "selection.grad_scope": cfg.selection.grad_scope,
        "selection.replacement": cfg.selection.replacement,
    }


def write_metrics_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.clean_loss!r},{r.adv_loss!r},{r.clean_acc!r},"
                     f"{r.robust_acc!r},{r.attack_passes_cum},{r.seconds!r}\n")


def read_metrics_csv(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ContractError(f"{path}: unexpected metrics header {lines[0] if lines else '(empty)'!r}")
    rows = []
    for ln in lines[1:]:
        fields = ln.split(",")
        if len(fields) != 7:
            raise ContractError(f"{path}: malformed metrics row {ln!r}")
        rows.append(EpochMetrics(int(fields[0]), float(fields[1]), float(fields[2]),
                                 float(fields[3]), float(fields[4]), int(fields[5]),
                                 float(fields[6])))
    return rows
