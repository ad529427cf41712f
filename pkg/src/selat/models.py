"""Classifier builders over the tensor engine.

Every model is a named, ordered bag of parameter tensors plus a pure forward
function from an input batch to logits. Architectures stay small on purpose:
an MLP, a 4-layer CNN for 28x28-style inputs, and a compact residual CNN
(about six conv layers) standing in for much deeper image models. There is no
batch normalization; optional input normalization is a fixed per-channel
affine layer, so it cannot interact with per-sample gradient computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import read_container, write_container
from .errors import ConfigError, FormatError

NORMALIZE_PRESETS = {
    # per-channel (mean, std) on the [0,1] pixel scale
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
}


@dataclass
class Model:
    name: str
    params: dict[str, Tensor]
    forward: Callable[[dict[str, Tensor], Tensor], Tensor]
    param_scopes: dict[str, list[str]] = field(default_factory=dict)
    input_shape: tuple = ()
    classes: int = 0

    def logits(self, x: Tensor) -> Tensor:
        return self.forward(self.params, x)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None


def _he_normal(rng, shape, fan_in):
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(ad.get_default_dtype()), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape, dtype=ad.get_default_dtype()), requires_grad=True)


def build_mlp(layer_sizes, seed) -> Model:
    """Fully connected ReLU network; layer_sizes includes input and output widths."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ConfigError(f"mlp needs at least input and output sizes, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ConfigError(f"mlp layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        params[f"fc{i}_w"] = _he_normal(rng, (n_in, n_out), n_in)
        params[f"fc{i}_b"] = _zeros((n_out,))
    depth = len(sizes) - 1

    def forward(p, x):
        h = ad.flatten(x) if x.ndim > 2 else x
        for i in range(1, depth + 1):
            h = ad.affine(h, p[f"fc{i}_w"], p[f"fc{i}_b"])
            if i < depth:
                h = ad.relu(h)
        return h

    name = "mlp;layers=" + ",".join(str(s) for s in sizes)
    scopes = {
        "all": list(params),
        "final_linear": [f"fc{depth}_w", f"fc{depth}_b"],
    }
    return Model(name, params, forward, scopes, input_shape=(sizes[0],), classes=sizes[-1])


def build_cnn4(input_shape, classes, seed, channels=(8, 16), hidden=64) -> Model:
    """Two conv+pool blocks then two affine layers (the 4 weight layers)."""
    C, H, W = (int(v) for v in input_shape)
    classes = int(classes)
    c1, c2 = (int(c) for c in channels)
    hidden = int(hidden)
    if classes < 2:
        raise ConfigError(f"classifier needs at least 2 classes, got {classes}")
    if H % 4 or W % 4:
        raise ConfigError(f"cnn4 pools twice; spatial dims must be multiples of 4, got {H}x{W}")
    rng = np.random.default_rng(seed)
    flat = c2 * (H // 4) * (W // 4)
    params = {
        "conv1_w": _he_normal(rng, (c1, C, 3, 3), C * 9),
        "conv1_b": _zeros((c1,)),
        "conv2_w": _he_normal(rng, (c2, c1, 3, 3), c1 * 9),
        "conv2_b": _zeros((c2,)),
        "fc1_w": _he_normal(rng, (flat, hidden), flat),
        "fc1_b": _zeros((hidden,)),
        "fc2_w": _he_normal(rng, (hidden, classes), hidden),
        "fc2_b": _zeros((classes,)),
    }

    def forward(p, x):
        h = ad.relu(ad.conv2d(x, p["conv1_w"], p["conv1_b"], padding="same"))
        h = ad.maxpool2x2(h)
        h = ad.relu(ad.conv2d(h, p["conv2_w"], p["conv2_b"], padding="same"))
        h = ad.maxpool2x2(h)
        h = ad.relu(ad.affine(ad.flatten(h), p["fc1_w"], p["fc1_b"]))
        return ad.affine(h, p["fc2_w"], p["fc2_b"])

    name = f"cnn4;in={C},{H},{W};classes={classes};channels={c1},{c2};hidden={hidden}"
    scopes = {"all": list(params), "final_linear": ["fc2_w", "fc2_b"]}
    return Model(name, params, forward, scopes, input_shape=(C, H, W), classes=classes)


def build_small_resnet(input_shape, classes, width, seed, normalize=None) -> Model:
    """Compact residual CNN: stem, two residual stages with 2x2 pooling between.

    Six conv layers total; identity skips inside each stage where channel
    counts match. ``normalize`` names a preset from NORMALIZE_PRESETS.
    """
    C, H, W = (int(v) for v in input_shape)
    classes = int(classes)
    width = int(width)
    if classes < 2:
        raise ConfigError(f"classifier needs at least 2 classes, got {classes}")
    if width < 1:
        raise ConfigError(f"width must be positive, got {width}")
    if H % 4 or W % 4:
        raise ConfigError(f"resnet_s pools twice; spatial dims must be multiples of 4, got {H}x{W}")
    norm_key = normalize if normalize else "none"
    if norm_key != "none" and norm_key not in NORMALIZE_PRESETS:
        raise ConfigError(f"unknown normalize preset {normalize!r}, options: none, {', '.join(NORMALIZE_PRESETS)}")
    if norm_key != "none" and len(NORMALIZE_PRESETS[norm_key][0]) != C:
        raise ConfigError(f"normalize preset {norm_key!r} is for {len(NORMALIZE_PRESETS[norm_key][0])}-channel input")

    rng = np.random.default_rng(seed)
    w1, w2 = width, 2 * width
    params = {
        "stem_w": _he_normal(rng, (w1, C, 3, 3), C * 9),
        "stem_b": _zeros((w1,)),
        "b1c1_w": _he_normal(rng, (w1, w1, 3, 3), w1 * 9),
        "b1c1_b": _zeros((w1,)),
        "b1c2_w": _he_normal(rng, (w1, w1, 3, 3), w1 * 9),
        "b1c2_b": _zeros((w1,)),
        "mid_w": _he_normal(rng, (w2, w1, 3, 3), w1 * 9),
        "mid_b": _zeros((w2,)),
        "b2c1_w": _he_normal(rng, (w2, w2, 3, 3), w2 * 9),
        "b2c1_b": _zeros((w2,)),
        "b2c2_w": _he_normal(rng, (w2, w2, 3, 3), w2 * 9),
        "b2c2_b": _zeros((w2,)),
        "fc_w": _he_normal(rng, (w2 * (H // 4) * (W // 4), classes), w2 * (H // 4) * (W // 4)),
        "fc_b": _zeros((classes,)),
    }

    if norm_key != "none":
        mean, std = NORMALIZE_PRESETS[norm_key]
        n_scale = 1.0 / np.asarray(std)
        n_shift = -np.asarray(mean) / np.asarray(std)
    else:
        n_scale = n_shift = None

    def block(p, h, tag):
        r = ad.relu(ad.conv2d(h, p[f"{tag}c1_w"], p[f"{tag}c1_b"], padding="same"))
        r = ad.conv2d(r, p[f"{tag}c2_w"], p[f"{tag}c2_b"], padding="same")
        return ad.relu(ad.add(r, h))

    def forward(p, x):
        h = ad.channel_affine(x, n_scale, n_shift) if n_scale is not None else x
        h = ad.relu(ad.conv2d(h, p["stem_w"], p["stem_b"], padding="same"))
        h = block(p, h, "b1")
        h = ad.maxpool2x2(h)
        h = ad.relu(ad.conv2d(h, p["mid_w"], p["mid_b"], padding="same"))
        h = block(p, h, "b2")
        h = ad.maxpool2x2(h)
        return ad.affine(ad.flatten(h), p["fc_w"], p["fc_b"])

    name = f"resnet_s;in={C},{H},{W};classes={classes};width={width};norm={norm_key}"
    scopes = {"all": list(params), "final_linear": ["fc_w", "fc_b"]}
    return Model(name, params, forward, scopes, input_shape=(C, H, W), classes=classes)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def _parse_name(name: str) -> tuple[str, dict[str, str]]:
    parts = name.split(";")
    kind = parts[0]
    kv = {}
    for part in parts[1:]:
        if "=" not in part:
            raise FormatError(f"malformed model name segment {part!r} in {name!r}")
        k, v = part.split("=", 1)
        kv[k] = v
    return kind, kv


def model_from_name(name: str, seed=0) -> Model:
    """Rebuild an architecture from its structured name (parameters unset)."""
    kind, kv = _parse_name(name)
    try:
        if kind == "mlp":
            return build_mlp([int(s) for s in kv["layers"].split(",")], seed)
        if kind == "cnn4":
            return build_cnn4(
                tuple(int(s) for s in kv["in"].split(",")),
                int(kv["classes"]),
                seed,
                channels=tuple(int(s) for s in kv["channels"].split(",")),
                hidden=int(kv["hidden"]),
            )
        if kind == "resnet_s":
            norm = kv.get("norm", "none")
            return build_small_resnet(
                tuple(int(s) for s in kv["in"].split(",")),
                int(kv["classes"]),
                int(kv["width"]),
                seed,
                normalize=None if norm == "none" else norm,
            )
    except KeyError as exc:
        raise FormatError(f"model name {name!r} is missing field {exc}") from None
    raise FormatError(f"unknown model kind {kind!r} in checkpoint name {name!r}")


def save_model(model: Model, path):
    """Write parameters to the flat binary checkpoint container."""
    write_container(path, model.name, {k: p.data for k, p in model.params.items()})


def load_model(path) -> Model:
    """Rebuild the architecture named in the checkpoint and load its parameters."""
    name, arrays = read_container(path)
    model = model_from_name(name)
    if set(arrays) != set(model.params):
        missing = set(model.params) - set(arrays)
        extra = set(arrays) - set(model.params)
        raise FormatError(f"checkpoint {path}: parameter names mismatch (missing {missing or '{}'}, extra {extra or '{}'})")
    for key, param in model.params.items():
        if arrays[key].shape != param.data.shape:
            raise FormatError(f"checkpoint {path}: {key} has shape {arrays[key].shape}, expected {param.data.shape}")
        param.data = arrays[key].astype(ad.get_default_dtype())
    return model
