"""Finite-difference verification of the reverse-mode gradients.

The oracle recomputes scalar objectives in float64 via central differences,
entirely outside the tape. Checks sample coordinates and require a high
pass fraction rather than unanimity: a ReLU kink inside the difference
stencil makes the numeric estimate wrong at isolated coordinates without
indicating a backward bug.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph

DEFAULT_STEP = 1e-3
DEFAULT_TOL = 1e-3
DEFAULT_MIN_FRAC = 0.95


def finite_difference_gradient(f, t, coordinate, step: float = DEFAULT_STEP) -> float:
    """Central difference (f(t+se) - f(t-se)) / 2s at one coordinate, in float64."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    base = np.array(t, dtype=np.float64)
    hi = base.copy()
    hi[coordinate] += step
    lo = base.copy()
    lo[coordinate] -= step
    return (float(f(hi)) - float(f(lo))) / (2.0 * step)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class GradCheckResult:
    name: str
    n_coords: int
    n_ok: int
    max_rel_err: float
    tol: float
    min_frac: float

    @property
    def fraction(self) -> float:
        return self.n_ok / self.n_coords if self.n_coords else 1.0

    @property
    def ok(self) -> bool:
        return self.fraction >= self.min_frac

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return (
            f"{status} {self.name}: {self.n_ok}/{self.n_coords} coords within "
            f"tol {self.tol:g}, max rel err {self.max_rel_err:.3e}"
        )


def _same_kink_signature(g_plus, g_minus) -> bool:
    """True when no relu / drop-aggregate input changed sign between graphs."""
    for node_p, node_m in zip(g_plus.nodes, g_minus.nodes):
        if node_p.op in ("relu", "drop_aggregate"):
            if not np.array_equal(np.sign(node_p.inputs[0].value),
                                  np.sign(node_m.inputs[0].value)):
                return False
    return True


def check_tensor_gradients(
    name,
    build,
    tensors,
    *,
    rng,
    coords_per_tensor: int = 30,
    total_coords: int | None = None,
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    min_frac: float = DEFAULT_MIN_FRAC,
) -> GradCheckResult:
    """Compare tape gradients of a scalar objective against the FD oracle.

    build(graph, leaves) must construct the objective and return the scalar
    loss node; leaves is a dict of param nodes keyed like tensors. The whole
    computation reruns in float64 for each probe, so the oracle shares no
    state with the checked backward pass. Coordinates are sampled per tensor
    (coords_per_tensor each) or uniformly across all tensors (total_coords).
    """
    tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    def evaluate(replace_key=None, replace_value=None):
        g = Graph(check_finite=False)
        leaves = {}
        for key, value in tensors.items():
            if key == replace_key:
                value = replace_value
            leaves[key] = g.leaf(value, param=True)
        return g, leaves, build(g, leaves)

    g, leaves, loss = evaluate()
    grads = g.backward(loss)
    analytic = {k: grads.get(n.id, np.zeros_like(tensors[k])) for k, n in leaves.items()}

    def probe(key, idx):
        """Two-sided difference plus whether the segment crossed a kink."""
        plus = tensors[key].copy()
        plus[idx] += step
        minus = tensors[key].copy()
        minus[idx] -= step
        g_plus, _, loss_plus = evaluate(key, plus)
        g_minus, _, loss_minus = evaluate(key, minus)
        numeric = (float(loss_plus.value) - float(loss_minus.value)) / (2.0 * step)
        return numeric, _same_kink_signature(g_plus, g_minus)

    # Candidate pools in a deterministic shuffled order. A coordinate whose
    # +-step probe flips the sign of some relu / drop-aggregate input sits
    # astride a kink: there the symmetric difference measures a blend of two
    # linear regions, not the derivative, so smooth candidates are preferred
    # and straddlers only backfill when a pool runs out.
    pools: list[tuple[int, list]] = []
    if total_coords is None:
        for key, value in tensors.items():
            order = [(key, np.unravel_index(int(f), value.shape))
                     for f in rng.permutation(value.size)]
            pools.append((min(coords_per_tensor, value.size), order))
    else:
        keys = list(tensors)
        sizes = np.array([tensors[k].size for k in keys])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        order = []
        for flat in rng.permutation(int(sizes.sum())):
            which = int(np.searchsorted(offsets, int(flat), side="right")) - 1
            key = keys[which]
            order.append((key, np.unravel_index(int(flat) - int(offsets[which]),
                                                tensors[key].shape)))
        pools.append((min(total_coords, len(order)), order))

    n_ok = 0
    max_err = 0.0
    n_scored = 0
    for want, order in pools:
        scored = []
        straddlers = []
        for key, idx in order:
            if len(scored) >= want:
                break
            numeric, smooth = probe(key, idx)
            (scored if smooth else straddlers).append((key, idx, numeric))
        scored += straddlers[: want - len(scored)]
        for key, idx, numeric in scored:
            err = relative_error(float(analytic[key][idx]), numeric)
            max_err = max(max_err, err)
            if err <= tol:
                n_ok += 1
        n_scored += len(scored)
    return GradCheckResult(name, n_scored, n_ok, max_err, tol, min_frac)


# -- the named checks -----------------------------------------------------


def check_conv2d(seed: int = 0) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 5, 3))
    kernel = rng.standard_normal((3, 3, 3, 4)) * 0.5
    bias = rng.standard_normal(4) * 0.1
    probe = rng.standard_normal((2, 5, 5, 4))

    def build(g, leaves):
        y = g.conv2d(leaves["x"], leaves["kernel"], leaves["bias"], padding="same")
        return g.sum(g.mul(y, g.leaf(probe)))

    return check_tensor_gradients(
        "conv2d", build, {"x": x, "kernel": kernel, "bias": bias}, rng=rng
    )


def check_relu(seed: int = 0) -> GradCheckResult:
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((4, 6, 5))
    x += np.where(x >= 0, 0.05, -0.05)  # keep preactivations off the kink
    probe = rng.standard_normal(x.shape)

    def build(g, leaves):
        return g.sum(g.mul(g.relu(leaves["x"]), g.leaf(probe)))

    return check_tensor_gradients("relu", build, {"x": x}, rng=rng)


def check_softmax_cross_entropy(seed: int = 0) -> GradCheckResult:
    rng = np.random.default_rng(seed + 2)
    n_classes = 6
    logits = rng.standard_normal((2, 5, 5, n_classes))
    labels = rng.integers(0, n_classes, size=(2, 5, 5))
    labels[0, 0, 0] = 255  # one ignored pixel
    weights = rng.uniform(0.5, 1.5, size=n_classes)

    counted = labels != 255
    mask = np.zeros(logits.shape)
    b, u, v = np.nonzero(counted)
    mask[b, u, v, labels[counted]] = weights[labels[counted]]
    denom = int(counted.sum())

    def build(g, leaves):
        logp = g.log_softmax_channels(leaves["logits"])
        return g.scale(g.sum(g.mul(logp, g.leaf(mask))), -1.0 / denom)

    return check_tensor_gradients("softmax_cross_entropy", build, {"logits": logits}, rng=rng)


def check_full_objective(seed: int = 0) -> GradCheckResult:
    """FD check of the complete composite training objective.

    Importance columns are computed once from the base classifier weights and
    held fixed across probes, matching the stop-gradient treatment in the
    analytic backward pass; both sides differentiate the same frozen-S
    objective.
    """
    from . import drop
    from .model import ModelConfig, init_model

    rng = np.random.default_rng(seed + 3)
    cfg = ModelConfig(
        n_classes=4, widths=(6, 8), feature_channels=8, expected_resolution=8
    )
    model = init_model(cfg, seed=seed)
    params = {k: v.astype(np.float64) for k, v in model.params.items()}

    x = rng.uniform(0.0, 1.0, size=(2, 8, 8, 3))
    labels = rng.integers(0, cfg.n_classes, size=(2, 8, 8))
    labels[0, :2, :2] = 255
    z = 1
    labels[1, 3:5, 3:5] = z  # make the drop mask non-trivial
    class_weights = rng.uniform(0.5, 1.5, size=cfg.n_classes)
    importance = params["classifier_kernel"].reshape(cfg.feature_channels, cfg.n_classes) / (8 * 8)

    def build(g, leaves):
        losses = drop.composite_loss(
            g,
            leaves,
            cfg,
            x,
            labels,
            z=z,
            lam=0.6,
            alpha=10.0,
            class_weights=class_weights,
            importance=importance,
        )
        return losses["l_total"]

    return check_tensor_gradients(
        "full_objective", build, params, rng=rng, total_coords=40
    )


def run_all(seed: int = 0) -> list[GradCheckResult]:
    return [
        check_conv2d(seed),
        check_relu(seed),
        check_softmax_cross_entropy(seed),
        check_full_objective(seed),
    ]
