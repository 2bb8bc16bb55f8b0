"""Segmentation network: stride-1 conv/ReLU feature extractor, a 1x1 conv
classifier producing per-pixel logits, and a compensation conv used only by
the feature-drop branch.

Parameters live in a flat name -> array dict so the trainer, the tape, and
the checkpoint format all share one ordering.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .errors import ConfigError, FormatError
from .graph import Graph

CHECKPOINT_MAGIC = b"DCM1"


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    widths: tuple[int, ...] = (16, 32, 32)
    kernel_size: int = 3
    feature_channels: int = 32
    comp_kernel_size: int = 1
    init_seed: int = 0
    in_channels: int = 3
    # Feature-map side length the drop branch is calibrated for; the
    # importance scores carry a 1/(h*w) factor that the compensation conv's
    # initial scale must undo, so the expected resolution is part of the
    # model recipe rather than discovered at run time.
    expected_resolution: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.n_classes < 1:
            raise ConfigError(f"n_classes must be >= 1, got {self.n_classes}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be non-empty positive ints, got {self.widths}")
        if self.widths[-1] != self.feature_channels:
            raise ConfigError(
                f"last extractor width {self.widths[-1]} must equal "
                f"feature_channels {self.feature_channels}"
            )
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.comp_kernel_size % 2 == 0 or self.comp_kernel_size < 1:
            raise ConfigError(
                f"comp_kernel_size must be odd and positive, got {self.comp_kernel_size}"
            )
        if self.in_channels < 1 or self.expected_resolution < 1:
            raise ConfigError("in_channels and expected_resolution must be positive")


def param_order(config: ModelConfig) -> list[str]:
    names = []
    for i in range(len(config.widths)):
        names += [f"conv{i}_kernel", f"conv{i}_bias"]
    names += ["classifier_kernel", "classifier_bias", "comp_kernel", "comp_bias"]
    return names


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    ks, ci = config.kernel_size, config.in_channels
    for i, co in enumerate(config.widths):
        shapes[f"conv{i}_kernel"] = (ks, ks, ci, co)
        shapes[f"conv{i}_bias"] = (co,)
        ci = co
    k, c, s = config.feature_channels, config.n_classes, config.comp_kernel_size
    shapes["classifier_kernel"] = (1, 1, k, c)
    shapes["classifier_bias"] = (c,)
    shapes["comp_kernel"] = (s, s, k, k)
    shapes["comp_bias"] = (k,)
    return shapes


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})


def init_model(config: ModelConfig, seed: int | None = None) -> Model:
    """Kaiming fan-in normal kernels, zero biases, deterministic per seed.

    The compensation conv deliberately departs from Kaiming: it starts as a
    scaled diagonal chosen so that aggregating the per-class features (each
    attenuated by importance scores of order W/(h*w)) and passing through
    the compensation layer reproduces roughly feature-scale activations.
    With a generic small random init the drop branch emits logits around
    1e-4 and learns nothing at this scale.
    """
    if seed is None:
        seed = config.init_seed
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    shapes = param_shapes(config)
    params: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith("_bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif name == "comp_kernel":
            continue  # filled below, needs the classifier weights
        else:
            fan_in = int(np.prod(shape[:3]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = rng.normal(0.0, std, size=shape).astype(np.float32)

    k, c, s = config.feature_channels, config.n_classes, config.comp_kernel_size
    hw = float(config.expected_resolution**2)
    w = params["classifier_kernel"].reshape(k, c).astype(np.float64)
    # Per-channel aggregation gain for non-negative features with no class
    # dropped: sum of the positive classifier weights over classes, / (C*h*w).
    pos = np.maximum(w, 0.0).sum(axis=1)
    # Channels whose positive column sum is tiny barely survive the relu in
    # the aggregate; no finite gain calibrates them, and an uncapped 1/pos
    # turns the frozen-at-init diagonal into a huge amplifier that couples
    # drop-branch gradients back into the shared trunk.  Cap the gain at the
    # mean-column value and let training fit the remainder.
    floor = max(float(pos.mean()), 1e-8)
    gain = (c * hw) / np.maximum(pos, floor)
    comp = np.zeros((s, s, k, k), dtype=np.float32)
    comp[s // 2, s // 2, np.arange(k), np.arange(k)] = gain.astype(np.float32)
    params["comp_kernel"] = comp
    return Model(config, params)


# -- forward passes ---------------------------------------------------------


def param_nodes(g: Graph, model: Model) -> dict:
    return {name: g.leaf(arr, param=True) for name, arr in model.params.items()}


def forward_graph(g: Graph, params: dict, config: ModelConfig, x):
    """Build extractor + classifier on the tape; returns (A, logits) nodes.

    params maps names to graph nodes; x is a node or an array.
    """
    h = x if hasattr(x, "value") else g.leaf(x)
    for i in range(len(config.widths)):
        h = g.conv2d(h, params[f"conv{i}_kernel"], params[f"conv{i}_bias"], padding="same")
        h = g.relu(h)
    logits = g.conv2d(h, params["classifier_kernel"], params["classifier_bias"], padding="same")
    return h, logits


def extract_features(model: Model, x: np.ndarray) -> np.ndarray:
    g = Graph()
    a, _ = forward_graph(g, param_nodes(g, model), model.config, np.asarray(x, dtype=np.float32))
    return a.value


def classify(model: Model, a: np.ndarray) -> np.ndarray:
    g = Graph()
    params = param_nodes(g, model)
    node = g.conv2d(g.leaf(np.asarray(a, dtype=np.float32)),
                    params["classifier_kernel"], params["classifier_bias"], padding="same")
    return node.value


def forward(model: Model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = Graph()
    a, logits = forward_graph(g, param_nodes(g, model), model.config,
                              np.asarray(x, dtype=np.float32))
    return a.value, logits.value


# -- checkpoints -------------------------------------------------------------


def _config_text(config: ModelConfig) -> str:
    lines = [
        "format=1",
        f"n_classes={config.n_classes}",
        "widths=" + ",".join(str(w) for w in config.widths),
        f"kernel_size={config.kernel_size}",
        f"feature_channels={config.feature_channels}",
        f"comp_kernel_size={config.comp_kernel_size}",
        f"init_seed={config.init_seed}",
        f"in_channels={config.in_channels}",
        f"expected_resolution={config.expected_resolution}",
    ]
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str, path) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}: bad checkpoint config line {line!r}")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()
    if kv.get("format") != "1":
        raise FormatError(f"{path}: unsupported checkpoint format {kv.get('format')!r}")
    try:
        return ModelConfig(
            n_classes=int(kv["n_classes"]),
            widths=tuple(int(w) for w in kv["widths"].split(",")),
            kernel_size=int(kv["kernel_size"]),
            feature_channels=int(kv["feature_channels"]),
            comp_kernel_size=int(kv["comp_kernel_size"]),
            init_seed=int(kv["init_seed"]),
            in_channels=int(kv["in_channels"]),
            expected_resolution=int(kv["expected_resolution"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: invalid checkpoint config ({exc})") from exc


def save_checkpoint(model: Model, path) -> None:
    config_blob = _config_text(model.config).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(config_blob)), config_blob]
    for name in param_order(model.config):
        parts.append(tensor.tensor_bytes(model.params[name]))
    tensor.atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path, n_classes: int | None = None) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated checkpoint header")
    (config_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + config_len:
        raise FormatError(f"{path}: truncated checkpoint config")
    config = _parse_config_text(blob[8 : 8 + config_len].decode("utf-8"), path)
    if n_classes is not None and config.n_classes != n_classes:
        raise ConfigError(
            f"{path}: checkpoint was trained with {config.n_classes} classes, "
            f"expected {n_classes}"
        )

    offset = 8 + config_len
    shapes = param_shapes(config)
    params: dict[str, np.ndarray] = {}
    for name in param_order(config):
        if len(blob) < offset + 8:
            raise FormatError(f"{path}: truncated before tensor {name!r}")
        shape, header = tensor._unpack_header(blob[offset:], tensor.TENSOR_MAGIC, path)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + header + 4 * count
        if len(blob) < end:
            raise FormatError(f"{path}: truncated tensor {name!r}")
        data = np.frombuffer(blob, dtype="<f4", offset=offset + header, count=count)
        arr = data.reshape(shape).astype(np.float32)
        if arr.shape != shapes[name]:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {arr.shape}, config gives {shapes[name]}"
            )
        tensor.check_finite(arr, f"checkpoint tensor {name!r}")
        params[name] = arr
        offset = end
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after parameters")
    return Model(config, params)
