"""Accuracy measurement on clean and attacked inputs, and cross-arm tables.

Robust accuracy always runs the attack with a random start drawn from a
fresh stream seeded per call, over unshuffled batches, so numbers are
comparable across method arms and repeatable across processes. Accuracy is
argmax-based with the lowest index winning ties, which counts a tied
prediction as wrong unless it ties at the label's own index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, pgd
from .autodiff import Tensor
from .data import Dataset, batches
from .errors import ContractError, FormatError


@dataclass
class EvalReport:
    method: str
    clean_acc: float
    robust_acc: dict = field(default_factory=dict)
    attack_passes_train: int = 0
    train_seconds: float = 0.0

    def __post_init__(self):
        for label, acc in list(self.robust_acc.items()) + [("clean", self.clean_acc)]:
            if not np.isnan(acc) and not 0.0 <= acc <= 100.0:
                raise ContractError(f"{label} accuracy {acc} outside [0, 100]")


def _correct_count(model, x, y) -> int:
    with ad.no_grad():
        logits = model.logits(Tensor(np.asarray(x, dtype=ad.get_default_dtype()))).data
    return int(np.sum(np.argmax(logits, axis=1) == np.asarray(y)))


def clean_accuracy(model, dataset: Dataset, batch_size=256) -> float:
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    hits = 0
    for xb, yb in batches(dataset, batch_size, shuffle=False):
        hits += _correct_count(model, xb, yb)
    return 100.0 * hits / len(dataset)


def robust_accuracy(model, dataset: Dataset, attack_cfg: AttackConfig, batch_size=256, seed=0) -> float:
    """Accuracy after attacking every sample; fresh attack rng from seed."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    cfg = AttackConfig(eps=attack_cfg.eps, alpha=attack_cfg.alpha, steps=attack_cfg.steps,
                       random_start=True, clip_min=attack_cfg.clip_min, clip_max=attack_cfg.clip_max)
    rng = np.random.default_rng(seed)
    hits = 0
    for xb, yb in batches(dataset, batch_size, shuffle=False):
        x_adv = pgd(model, xb, yb, cfg, rng=rng)
        hits += _correct_count(model, x_adv, yb)
    return 100.0 * hits / len(dataset)


# ---------------------------------------------------------------------------
# comparison tables
# ---------------------------------------------------------------------------


def compare_report(reports) -> str:
    """Fixed-width text table, one row per method, sorted by method name."""
    reports = sorted(reports, key=lambda r: r.method)
    if not reports:
        raise ContractError("no reports to compare")
    labels = sorted({lab for r in reports for lab in r.robust_acc})
    headers = ["method", "clean_acc"] + labels + ["attack_passes", "seconds"]
    rows = []
    for r in reports:
        cells = [r.method, f"{r.clean_acc:.2f}"]
        cells += [f"{r.robust_acc[lab]:.2f}" if lab in r.robust_acc else "-" for lab in labels]
        cells += [str(r.attack_passes_train), f"{r.train_seconds:.1f}"]
        rows.append(cells)
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    fmt = "  ".join(f"{{:<{widths[0]}}}" if i == 0 else f"{{:>{w}}}"
                    for i, w in enumerate(widths)).format
    return "\n".join([fmt(*headers)] + [fmt(*row) for row in rows])


def write_reports_csv(path, reports):
    """Round-trippable CSV; robust accuracies packed as label=value pairs."""
    reports = sorted(reports, key=lambda r: r.method)
    with open(path, "w") as fh:
        fh.write("method,clean_acc,robust,attack_passes_train,train_seconds\n")
        for r in reports:
            robust = ";".join(f"{lab}={r.robust_acc[lab]!r}" for lab in sorted(r.robust_acc))
            fh.write(f"{r.method},{r.clean_acc!r},{robust},{r.attack_passes_train},{r.train_seconds!r}\n")


def read_reports_csv(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != "method,clean_acc,robust,attack_passes_train,train_seconds":
        raise FormatError(f"{path}: not a comparison report CSV")
    reports = []
    for ln in lines[1:]:
        fields = ln.split(",")
        if len(fields) != 5:
            raise FormatError(f"{path}: malformed report row {ln!r}")
        robust = {}
        if fields[2]:
            for pair in fields[2].split(";"):
                if "=" not in pair:
                    raise FormatError(f"{path}: malformed robust cell {fields[2]!r}")
                lab, val = pair.split("=", 1)
                robust[lab] = float(val)
        reports.append(EvalReport(fields[0], float(fields[1]), robust,
                                  int(fields[3]), float(fields[4])))
    return reports
