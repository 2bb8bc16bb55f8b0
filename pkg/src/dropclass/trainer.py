"""Training loops: the feature-drop scheme, the plain baseline, and the
ablation variants, over SGD with momentum and linearly decaying LR.

Randomness is split into independent streams (model init, batch shuffling,
drop sampling) spawned from one master seed, so a run where the drop never
fires consumes exactly the same shuffle sequence as a baseline run and the
two trajectories coincide bit for bit.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import datagen, drop
from .errors import ConfigError, TrainingDiverged
from .graph import Graph
from .model import Model, ModelConfig, init_model
from .tensor import IGNORE_LABEL, atomic_write_text, save_labels, save_tensor

MODES = ("baseline", "dropclass", "ablation_no_sup", "ablation_label_drop")
DEFAULT_BASELINE_ITERATIONS = 3000
# The drop scheme converges slower; its default budget is twice the baseline's.
DEFAULT_DROPCLASS_ITERATIONS = 2 * DEFAULT_BASELINE_ITERATIONS

TRACE_COLUMNS = ("iteration", "l_ce", "l_ce_drop", "l_seg", "l_sup", "l_total",
                 "lambda", "p_drop", "z")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"
    total_iterations: int | None = None  # None: mode-dependent default
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    alpha: float = 10.0
    reweighting: bool = False
    resample_class: int | None = None
    seed: int = 0
    model: ModelConfig | None = None
    # Diagnostic hook: pin (lambda, p) instead of ramping. A dropclass run
    # pinned at (0, 0) must retrace the baseline exactly.
    ramp_override: tuple | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.total_iterations is not None and self.total_iterations < 1:
            raise ConfigError(f"total_iterations must be >= 1, got {self.total_iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.ramp_override is not None:
            lam, p = self.ramp_override
            if not (0.0 <= lam <= 1.0 and 0.0 <= p <= 1.0):
                raise ConfigError(f"ramp_override values must be in [0, 1], got {self.ramp_override}")

    def resolved(self, dataset: datagen.Dataset) -> "TrainConfig":
        """Fill mode-dependent defaults and the model shape from the dataset."""
        total = self.total_iterations
        if total is None:
            total = (DEFAULT_BASELINE_ITERATIONS if self.mode == "baseline"
                     else DEFAULT_DROPCLASS_ITERATIONS)
        model = self.model
        if model is None:
            model = ModelConfig(
                n_classes=dataset.n_classes,
                expected_resolution=dataset.spec.image_size,
            )
        elif model.n_classes != dataset.n_classes:
            raise ConfigError(
                f"model expects {model.n_classes} classes, dataset has {dataset.n_classes}"
            )
        if self.resample_class is not None and not 0 <= self.resample_class < dataset.n_classes:
            raise ConfigError(f"resample_class {self.resample_class} out of range")
        return replace(self, total_iterations=total, model=model)


@dataclass(frozen=True)
class Schedules:
    t: int
    total: int
    lam: float
    p_drop: float
    alpha: float
    lr: float


@dataclass
class TraceRow:
    iteration: int
    l_ce: float
    l_ce_drop: float
    l_seg: float
    l_sup: float
    l_total: float
    lam: float
    p_drop: float
    z: int | None


@dataclass
class TrainReport:
    trace: list
    model: Model
    z_audit: list
    wall_clock: float
    class_weights: np.ndarray | None
    config: TrainConfig


def schedules_for(t: int, config: TrainConfig) -> Schedules:
    total = config.total_iterations
    if config.ramp_override is not None:
        lam, p = config.ramp_override
    else:
        lam, p = drop.schedule_at(t, total)
    lr = config.lr * (1.0 - t / total)
    return Schedules(t, total, lam, p, config.alpha, lr)


def sgd_update(params: dict, grads: dict, lr: float, momentum: float, velocity: dict) -> dict:
    """v <- m*v + g; p <- p - lr*v, in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        v = velocity[name]
        v *= momentum
        v += g
        p -= lr * v
    return params


def _assert_finite(value, what: str, t: int, batch_indices):
    if not np.isfinite(value).all():
        raise TrainingDiverged(
            f"non-finite {what} at iteration {t}",
            iteration=t,
            batch_indices=list(map(int, batch_indices)),
        )


def train_step(
    model: Model,
    batch,
    sched: Schedules,
    config: TrainConfig,
    rng,
    *,
    velocity: dict | None = None,
    class_weights=None,
    batch_indices=(),
):
    """One optimization step; mutates model parameters in place.

    batch is (images [B,h,w,3], labels [B,h,w]). The drop class is sampled
    here, once for the whole batch; baseline mode draws nothing.
    """
    images, labels = batch
    if len(images) == 0:
        raise ConfigError("train_step needs a non-empty batch")
    n_classes = model.config.n_classes

    mode = config.mode
    z = None
    lam = 0.0
    alpha = 0.0
    if mode in ("dropclass", "ablation_no_sup"):
        z = drop.sample_drop(rng, n_classes, sched.p_drop)
        lam = sched.lam
        alpha = sched.alpha if mode == "dropclass" else 0.0
    elif mode == "ablation_label_drop":
        z = drop.sample_drop(rng, n_classes, sched.p_drop)
        if z is not None:
            labels = np.where(labels == z, IGNORE_LABEL, labels).astype(labels.dtype)
        # no drop branch: the sampled class is simply ignored by the CE loss

    g = Graph(check_finite=False)
    params = {name: g.leaf(arr, param=True) for name, arr in model.params.items()}
    losses = drop.composite_loss(
        g, params, model.config, images, labels,
        z=z if mode in ("dropclass", "ablation_no_sup") else None,
        lam=lam, alpha=alpha, class_weights=class_weights,
    )

    breakdown = drop.LossBreakdown(
        l_ce=float(losses["l_ce"].value),
        l_ce_drop=float(losses["l_ce_drop"].value),
        l_seg=float(losses["l_seg"].value),
        l_sup=float(losses["l_sup"].value),
        l_total=float(losses["l_total"].value),
    )
    _assert_finite(np.array([breakdown.l_ce, breakdown.l_ce_drop, breakdown.l_seg,
                             breakdown.l_sup, breakdown.l_total]),
                   "loss", sched.t, batch_indices)

    if sched.lr != 0.0:
        grads = g.backward(losses["l_total"])
        pgrads = {name: grads.get(node.id, np.zeros_like(node.value))
                  for name, node in params.items()}
        for name, arr in pgrads.items():
            _assert_finite(arr, f"gradient of {name}", sched.t, batch_indices)
        if velocity is None:
            velocity = {name: np.zeros_like(arr) for name, arr in model.params.items()}
        sgd_update(model.params, pgrads, sched.lr, config.momentum, velocity)
        for name, arr in model.params.items():
            _assert_finite(arr, f"parameter {name}", sched.t, batch_indices)
    return model, breakdown, z


def _dump_divergence(out_dir, t: int, batch, exc: TrainingDiverged) -> None:
    dump = os.path.join(os.fspath(out_dir), f"diverged_step{t}")
    os.makedirs(dump, exist_ok=True)
    images, labels = batch
    for i in range(len(images)):
        save_tensor(images[i], os.path.join(dump, f"img_{i}.dct1"))
        save_labels(labels[i], os.path.join(dump, f"lab_{i}.dcl1"))
    atomic_write_text(os.path.join(dump, "report.txt"),
                      f"{exc}\nbatch indices: {exc.batch_indices}\n")


def train(dataset: datagen.Dataset, config: TrainConfig, out_dir=None, progress=None) -> TrainReport:
    """Run config.total_iterations steps over shuffled batches.

    Reshuffles each epoch from a dedicated stream; duplication resampling
    (when configured) happens before batching so every epoch sees the
    enlarged sample list. On divergence the offending batch is dumped under
    out_dir (when given) before the exception propagates.
    """
    config = config.resolved(dataset)
    if config.resample_class is not None:
        dataset = datagen.resample_with_duplication(dataset, config.resample_class)
    images, labels = dataset.stacked()
    n = len(images)

    class_weights = None
    if config.reweighting:
        class_weights = datagen.median_frequency_weights(datagen.pixel_frequencies(dataset))

    master = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss, drop_ss = master.spawn(3)
    model = init_model(config.model, seed=int(init_ss.generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    velocity = {name: np.zeros_like(arr) for name, arr in model.params.items()}

    trace: list[TraceRow] = []
    z_audit: list = []
    chunks: list = []
    started = time.perf_counter()
    for t in range(config.total_iterations):
        if not chunks:
            perm = shuffle_rng.permutation(n)
            chunks = [perm[i : i + config.batch_size] for i in range(0, n, config.batch_size)]
        idx = chunks.pop(0)
        batch = (images[idx], labels[idx])
        sched = schedules_for(t, config)
        try:
            model, breakdown, z = train_step(
                model, batch, sched, config, drop_rng,
                velocity=velocity, class_weights=class_weights, batch_indices=idx,
            )
        except TrainingDiverged as exc:
            if out_dir is not None:
                _dump_divergence(out_dir, t, batch, exc)
            raise
        trace.append(TraceRow(t, breakdown.l_ce, breakdown.l_ce_drop, breakdown.l_seg,
                              breakdown.l_sup, breakdown.l_total, sched.lam, sched.p_drop, z))
        z_audit.append(z)
        if progress is not None:
            progress(t, config.total_iterations, breakdown)
    wall = time.perf_counter() - started
    return TrainReport(trace, model, z_audit, wall, class_weights, config)


# -- loss trace CSV -----------------------------------------------------------


def trace_csv(trace) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    for row in trace:
        z = -1 if row.z is None else row.z
        lines.append(
            f"{row.iteration},{row.l_ce:.9g},{row.l_ce_drop:.9g},{row.l_seg:.9g},"
            f"{row.l_sup:.9g},{row.l_total:.9g},{row.lam:.9g},{row.p_drop:.9g},{z}"
        )
    return "\n".join(lines) + "\n"


def write_trace(trace, path) -> None:
    atomic_write_text(path, trace_csv(trace))
