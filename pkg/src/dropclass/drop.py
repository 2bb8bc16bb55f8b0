"""Feature-drop training scheme: importance scores, class-specific features,
drop sampling, aggregation, and the composite loss.

Importance scores are the spatial mean of d(logit_c)/d(feature); under a
1x1-conv classifier that derivative is the classifier weight itself, so the
analytic path just reads W and divides by h*w. The autodiff path over the
real tape is kept as a cross-check.

Importance scores are treated as constants when differentiating the losses
(no gradient flows into the classifier weights through the score itself).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import model as model_mod
from .errors import ConfigError, DimensionError
from .graph import Graph
from .tensor import IGNORE_LABEL


@dataclass
class LossBreakdown:
    l_ce: float
    l_ce_drop: float
    l_seg: float
    l_sup: float
    l_total: float


@dataclass
class DropState:
    importance_maps: list  # one [.., h, w, k] tensor per class
    class_features: list  # one [.., h, w, k] tensor per class, each >= 0
    z: int | None
    aggregated: np.ndarray
    compensated: np.ndarray
    dropped_logits: np.ndarray


# -- importance and class features -------------------------------------------


def importance_matrix(classifier_kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    """All classes at once: column c holds the importance of each channel."""
    _, _, k, c = classifier_kernel.shape
    return classifier_kernel.reshape(k, c) / float(h * w)


def importance_map(model, a: np.ndarray, c: int, method: str = "analytic") -> np.ndarray:
    """Spatially averaged gradient of class-c logits w.r.t. the features.

    Returns a tensor shaped like `a`. The analytic path exploits the 1x1
    classifier (the per-channel score is W[:, c] / (h*w), constant over
    space); the autodiff path differentiates the actual classifier graph.
    """
    a = np.asarray(a)
    if not 0 <= c < model.config.n_classes:
        raise DimensionError(f"class {c} out of range for {model.config.n_classes} classes")
    h, w = a.shape[-3], a.shape[-2]
    if method == "analytic":
        column = importance_matrix(model.params["classifier_kernel"], h, w)[:, c]
        return np.broadcast_to(column.astype(a.dtype), a.shape).copy()
    if method == "autodiff":
        g = Graph()
        a_leaf = g.leaf(a, param=True)
        kernel = g.leaf(model.params["classifier_kernel"])
        bias = g.leaf(model.params["classifier_bias"])
        logits = g.conv2d(a_leaf, kernel, bias, padding="same")
        mean_logit = g.scale(g.sum(g.select_channel(logits, c)), 1.0 / (h * w))
        return g.backward(mean_logit)[a_leaf.id]
    raise ConfigError(f"unknown importance method {method!r}")


def class_feature(a: np.ndarray, s: np.ndarray) -> np.ndarray:
    """ReLU(a * s): the features that push class c's logit up."""
    a = np.asarray(a)
    s = np.asarray(s)
    if s.shape != a.shape and s.shape != a.shape[-1:]:
        raise DimensionError(f"importance shape {s.shape} does not match features {a.shape}")
    return np.maximum(a * s, 0)


# -- drop sampling and aggregation --------------------------------------------


def sample_drop(rng, class_count: int, p: float) -> int | None:
    """With probability p, a uniformly drawn class index; otherwise None.

    One draw per training step, shared by the whole batch. p <= 0 consumes
    no random numbers, so a run with the drop disabled replays identically
    to one that never had a drop branch.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"drop probability must be in [0, 1], got {p}")
    if class_count < 1:
        raise ConfigError(f"class_count must be >= 1, got {class_count}")
    if p <= 0.0:
        return None
    if rng.random() >= p:
        return None
    return int(rng.integers(0, class_count))


def aggregate(class_features: list, z: int | None) -> np.ndarray:
    """(1/|C|) * sum of all class features except z's.

    The divisor stays |C| even when a class is dropped; with z None every
    class contributes.
    """
    if not class_features:
        raise DimensionError("aggregate needs at least one class feature")
    shape = np.asarray(class_features[0]).shape
    total = np.zeros(shape, dtype=np.asarray(class_features[0]).dtype)
    for c, feat in enumerate(class_features):
        feat = np.asarray(feat)
        if feat.shape != shape:
            raise DimensionError(f"class feature {c} has shape {feat.shape}, expected {shape}")
        if c != z:
            total += feat
    return total / len(class_features)


def drop_forward(model, a: np.ndarray, z: int | None):
    """Full drop branch on explicit tensors; returns (DropState, dropped logits).

    The compensation conv runs on the aggregate, then the shared classifier
    produces the drop-branch logits.
    """
    a = np.asarray(a, dtype=np.float32)
    cfg = model.config
    if a.shape[-1] != cfg.feature_channels:
        raise DimensionError(
            f"features have {a.shape[-1]} channels, model expects {cfg.feature_channels}"
        )
    if z is not None and not 0 <= z < cfg.n_classes:
        raise DimensionError(f"drop class {z} out of range for {cfg.n_classes} classes")
    maps = [importance_map(model, a, c) for c in range(cfg.n_classes)]
    feats = [class_feature(a, s) for s in maps]
    agg = aggregate(feats, z)

    batched = agg.ndim == 4
    agg4 = agg if batched else agg[None]
    pad = (cfg.comp_kernel_size // 2,) * 2
    compensated, _ = kernels.conv2d_forward(
        agg4, model.params["comp_kernel"], model.params["comp_bias"], pad
    )
    logits, _ = kernels.conv2d_forward(
        compensated, model.params["classifier_kernel"], model.params["classifier_bias"], (0, 0)
    )
    if not batched:
        compensated, logits = compensated[0], logits[0]
    state = DropState(maps, feats, z, agg, compensated, logits)
    return state, logits


# -- losses (plain-tensor forms) ----------------------------------------------


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "ui":
        raise DimensionError("labels must be integer class indices")
    bad = (labels != IGNORE_LABEL) & (labels >= n_classes)
    if bad.any():
        raise DimensionError(
            f"label {int(labels[bad][0])} out of range for {n_classes} classes"
        )
    return labels


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _resolve_weights(class_weights, n_classes: int) -> np.ndarray:
    if class_weights is None:
        return np.ones(n_classes)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (n_classes,):
        raise DimensionError(
            f"class_weights must have shape ({n_classes},), got {class_weights.shape}"
        )
    return class_weights


def loss_ce(y_hat: np.ndarray, y: np.ndarray, class_weights=None) -> float:
    """Class-weighted cross entropy, averaged over non-ignored pixels.

    The denominator is the plain pixel count (not the weight sum), so
    all-ones weights give the unweighted mean.
    """
    y_hat = np.asarray(y_hat)
    n_classes = y_hat.shape[-1]
    y = _check_labels(y, n_classes)
    if y.shape != y_hat.shape[:-1]:
        raise DimensionError(f"labels {y.shape} do not match logits {y_hat.shape}")
    weights = _resolve_weights(class_weights, n_classes)
    counted = y != IGNORE_LABEL
    if not counted.any():
        return 0.0
    logp = _log_softmax(np.asarray(y_hat, dtype=np.float64))
    picked = logp[counted]
    classes = y[counted]
    nll = -picked[np.arange(classes.size), classes] * weights[classes]
    return float(nll.sum() / counted.sum())


def loss_ce_drop(y_drop: np.ndarray, y: np.ndarray, z: int | None, class_weights=None) -> float:
    """Cross entropy with pixels labeled z zeroed out of the numerator.

    The averaging denominator is unchanged (still the count of non-ignored
    pixels), so masking pulls the mean down rather than renormalizing.
    """
    if z is None:
        return loss_ce(y_drop, y, class_weights)
    y_drop = np.asarray(y_drop)
    n_classes = y_drop.shape[-1]
    if not 0 <= z < n_classes:
        raise DimensionError(f"drop class {z} out of range for {n_classes} classes")
    y = _check_labels(y, n_classes)
    weights = _resolve_weights(class_weights, n_classes)
    counted = y != IGNORE_LABEL
    if not counted.any():
        return 0.0
    scored = counted & (y != z)
    logp = _log_softmax(np.asarray(y_drop, dtype=np.float64))
    picked = logp[scored]
    classes = y[scored]
    nll = -picked[np.arange(classes.size), classes] * weights[classes]
    return float(nll.sum() / counted.sum())


def loss_seg(l_ce: float, l_ce_drop: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    return (1.0 - lam) * l_ce + lam * l_ce_drop


def loss_sup(y_drop: np.ndarray, z: int | None) -> float:
    """Mean predicted probability of the dropped class, over every pixel."""
    if z is None:
        return 0.0
    y_drop = np.asarray(y_drop)
    n_classes = y_drop.shape[-1]
    if not 0 <= z < n_classes:
        raise DimensionError(f"drop class {z} out of range for {n_classes} classes")
    p = np.exp(_log_softmax(np.asarray(y_drop, dtype=np.float64)))
    return float(p[..., z].mean())


def loss_total(l_seg: float, l_sup: float, alpha: float) -> float:
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    return l_seg + alpha * l_sup


def schedule_at(t: int, total_iterations: int) -> tuple[float, float]:
    """Linear ramps: lambda and the drop probability both equal t / T."""
    if total_iterations <= 0:
        raise ConfigError(f"total_iterations must be positive, got {total_iterations}")
    if not 0 <= t <= total_iterations:
        raise ConfigError(f"iteration {t} outside [0, {total_iterations}]")
    frac = t / total_iterations
    return frac, frac


# -- differentiable composite objective ---------------------------------------


def _ce_mask(labels: np.ndarray, n_classes: int, weights: np.ndarray, dtype, exclude=None):
    """One-hot target mask scaled by class weight; 0 at ignored/excluded pixels."""
    counted = labels != IGNORE_LABEL
    mask = np.zeros(labels.shape + (n_classes,), dtype=dtype)
    scored = counted if exclude is None else counted & (labels != exclude)
    idx = np.nonzero(scored)
    classes = labels[scored]
    mask[idx + (classes,)] = weights[classes]
    return mask, int(counted.sum())


def composite_loss(
    g: Graph,
    params: dict,
    config,
    x: np.ndarray,
    labels: np.ndarray,
    *,
    z: int | None,
    lam: float,
    alpha: float,
    class_weights=None,
    importance: np.ndarray | None = None,
):
    """Build the full training objective on the tape.

    Returns a dict of scalar loss nodes (l_ce, l_ce_drop, l_seg, l_sup,
    l_total) plus the feature and logit nodes. `importance` is the frozen
    [k, n_classes] score matrix; by default it is read off the current
    classifier weights, detached. The drop branch is only built when it can
    contribute (z set or lam > 0): with z None and lam 0 the objective
    degenerates to plain cross entropy exactly.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    labels = _check_labels(labels, config.n_classes)
    weights = _resolve_weights(class_weights, config.n_classes)

    a, logits = model_mod.forward_graph(g, params, config, x)
    dtype = logits.value.dtype
    if labels.shape != logits.value.shape[:-1]:
        raise DimensionError(
            f"labels {labels.shape} do not match logits {logits.value.shape}"
        )

    def zero():
        return g.leaf(np.zeros((), dtype=dtype))

    def ce_node(logit_node, exclude=None):
        mask, denom = _ce_mask(labels, config.n_classes, weights, dtype, exclude)
        if denom == 0:
            return zero()
        logp = g.log_softmax_channels(logit_node)
        return g.scale(g.sum(g.mul(logp, g.leaf(mask))), -1.0 / denom)

    l_ce = ce_node(logits)
    logits_drop = None
    need_drop = z is not None or lam > 0
    if need_drop:
        if importance is None:
            h, w = a.value.shape[-3], a.value.shape[-2]
            importance = importance_matrix(params["classifier_kernel"].value, h, w)
        agg = g.drop_aggregate(a, importance, z)
        compensated = g.conv2d(agg, params["comp_kernel"], params["comp_bias"], padding="same")
        logits_drop = g.conv2d(
            compensated, params["classifier_kernel"], params["classifier_bias"], padding="same"
        )
        l_ce_drop = ce_node(logits_drop, exclude=z)
        if z is not None:
            prob = g.softmax_channels(logits_drop)
            l_sup = g.scale(g.sum(g.select_channel(prob, z)), 1.0 / labels.size)
        else:
            l_sup = zero()
    else:
        l_ce_drop = zero()
        l_sup = zero()

    l_seg = g.add(g.scale(l_ce, 1.0 - lam), g.scale(l_ce_drop, lam))
    l_total = g.add(l_seg, g.scale(l_sup, alpha))
    return {
        "l_ce": l_ce,
        "l_ce_drop": l_ce_drop,
        "l_seg": l_seg,
        "l_sup": l_sup,
        "l_total": l_total,
        "features": a,
        "logits": logits,
        "logits_drop": logits_drop,
    }
