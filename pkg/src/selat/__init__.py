"""Selective adversarial training on a minimal numpy tensor engine.

Instead of perturbing every training sample, a scored fraction rho of each
minibatch is attacked with multi-step PGD and the model descends a mixed
clean/adversarial objective. Sample scoring is either margin-based (inverse
logit margin) or gradient-based (cosine alignment of per-sample parameter
gradients with the batch mean), with uniform-random and attack-everything
baselines sharing the same loop for equal-budget comparisons.
"""

from .attacks import AttackConfig, AttackCounter, fgsm, pgd, project_linf
from .autodiff import Tensor, backward, no_grad, use_dtype
from .data import Dataset, batches, load_cifar10_bin, load_mnist_idx, make_synthetic_blobs
from .errors import (ConfigError, ContractError, DegenerateWeightsError,
                     FormatError, ShapeError)
from .evaluation import EvalReport, clean_accuracy, compare_report, robust_accuracy
from .models import Model, build_cnn4, build_mlp, build_small_resnet, load_model, save_model
from .selection import (BatchState, SelectionConfig, SelectionDecision,
                        sample_subset, select)
from .trainer import TrainConfig, TrainRecord, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackCounter", "fgsm", "pgd", "project_linf",
    "Tensor", "backward", "no_grad", "use_dtype",
    "Dataset", "batches", "load_cifar10_bin", "load_mnist_idx", "make_synthetic_blobs",
    "ConfigError", "ContractError", "DegenerateWeightsError", "FormatError", "ShapeError",
    "EvalReport", "clean_accuracy", "compare_report", "robust_accuracy",
    "Model", "build_cnn4", "build_mlp", "build_small_resnet", "load_model", "save_model",
    "BatchState", "SelectionConfig", "SelectionDecision", "sample_subset", "select",
    "TrainConfig", "TrainRecord", "train",
]
