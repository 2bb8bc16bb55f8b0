"""Metrics and bias-analysis protocols.

Per-class IoU tables (with the rare-class mean), the class-erasure
benchmark, classifier-weight cosine correlation, and importance-map export.
All protocols are read-only over a model snapshot; erased copies are
evaluated independently so report content does not depend on order.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import datagen
from . import model as model_mod
from .drop import importance_map
from .errors import DimensionError, ProtocolError
from .tensor import IGNORE_LABEL, atomic_write_text

DEFAULT_BATCH = 16
TOP_K = 3


def _fmt(v) -> str:
    return "%.9g" % float(v)


# -- IoU --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class IoUReport:
    """Per-class IoU with aggregate means.

    iou holds NaN for classes absent from both prediction and label
    (zero union); those are excluded from every mean. miou_dagger is the
    plain mean over the least-frequent half of classes and is only set
    when training-split frequencies were supplied.
    """

    iou: np.ndarray            # [C] float64, NaN where absent
    present: np.ndarray        # [C] bool
    miou: float
    miou_dagger: float | None = None
    dagger_classes: tuple | None = None
    frequencies: np.ndarray | None = None


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    """Accumulated [label, prediction] pixel counts, ignore excluded."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DimensionError(
            f"prediction shape {predictions.shape} != label shape {labels.shape}"
        )
    valid = labels != IGNORE_LABEL
    p = predictions[valid].astype(np.int64)
    y = labels[valid].astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise DimensionError(f"labels out of range for {n_classes} classes")
    if p.size and (p.min() < 0 or p.max() >= n_classes):
        raise DimensionError(f"predictions out of range for {n_classes} classes")
    counts = np.bincount(y * n_classes + p, minlength=n_classes * n_classes)
    return counts.reshape(n_classes, n_classes)


def _iou_from_confusion(confusion: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp
    union = tp + fp + fn
    present = union > 0
    iou = np.full(confusion.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    return iou, present


def dagger_classes(frequencies, n_classes: int) -> tuple:
    """The floor(C/2) lowest-frequency class indices, ties broken by index."""
    frequencies = np.asarray(frequencies, dtype=np.float64)
    if frequencies.shape != (n_classes,):
        raise DimensionError(
            f"expected {n_classes} frequencies, got shape {frequencies.shape}"
        )
    order = np.lexsort((np.arange(n_classes), frequencies))
    return tuple(sorted(int(i) for i in order[: n_classes // 2]))


def iou_per_class(predictions, labels, n_classes: int, frequencies=None) -> IoUReport:
    """IoU_c = TP/(TP+FP+FN) accumulated over all given maps."""
    confusion = confusion_matrix(predictions, labels, n_classes)
    iou, present = _iou_from_confusion(confusion)
    miou = float(np.mean(iou[present])) if present.any() else float("nan")
    report = IoUReport(iou=iou, present=present, miou=miou)
    if frequencies is not None:
        dag = dagger_classes(frequencies, n_classes)
        report = IoUReport(
            iou=iou,
            present=present,
            miou=miou,
            miou_dagger=miou_dagger(report, frequencies),
            dagger_classes=dag,
            frequencies=np.asarray(frequencies, dtype=np.float64),
        )
    return report


def miou_dagger(report: IoUReport, frequencies) -> float:
    """Plain mean IoU over the least-frequent half of classes.

    frequencies must come from the training split, not the evaluated one.
    """
    n_classes = report.iou.shape[0]
    picked = list(dagger_classes(frequencies, n_classes))
    vals = report.iou[picked]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else float("nan")


# -- model predictions ------------------------------------------------------


def predict_labels(model, images: np.ndarray, batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    """Argmax class map for a batch of images, chunked to bound memory."""
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    out = []
    for i in range(0, images.shape[0], batch_size):
        _, logits = model_mod.forward(model, images[i : i + batch_size])
        out.append(np.argmax(logits, axis=-1).astype(np.uint8))
    pred = np.concatenate(out, axis=0)
    return pred[0] if single else pred


def _dataset_predictions(dataset, model, predict_fn, batch_size):
    if predict_fn is not None:
        return np.stack([np.asarray(predict_fn(s)) for s in dataset.samples])
    images, _ = dataset.stacked()
    return predict_labels(model, images, batch_size=batch_size)


# -- erasure benchmark ------------------------------------------------------


@dataclass(frozen=True)
class ErasureRow:
    class_index: int
    top3: tuple
    iou_intact: float
    iou_erased: float   # mean over the class's Top-3 erased sets

    @property
    def delta(self) -> float:
        return self.iou_erased - self.iou_intact


@dataclass(frozen=True, eq=False)
class ErasureReport:
    rows: tuple            # ErasureRow per class defined on the intact set
    miou_intact: float
    miou_erased: float
    top3: dict             # evaluated class -> eraser tuple, reusable verbatim
    iou_by_eraser: np.ndarray  # [C eraser, C evaluated] float64, NaN absent

    def row(self, class_index: int) -> ErasureRow:
        for r in self.rows:
            if r.class_index == class_index:
                return r
        raise ProtocolError(f"class {class_index} was not evaluated (absent)")


def erasure_benchmark(
    model,
    dataset,
    top3: dict | None = None,
    predict_fn=None,
    batch_size: int = DEFAULT_BATCH,
) -> ErasureReport:
    """Quantify how much each class's IoU leans on co-occurring classes.

    For every class X the dataset is copied with X masked out (mean-color
    fill, ignore label) and all remaining classes are re-scored. A class Y's
    three most influential erasers are the X with the largest IoU drop;
    IoU(I*) is Y's mean IoU over those three erased copies and
    delta = IoU(I*) - IoU(I). Pass the reference report's `top3` when
    scoring a comparison model so both models are read on the same sets.
    """
    n_classes = dataset.n_classes
    if n_classes < 4:
        raise ProtocolError(
            f"erasure benchmark needs >= 4 classes for a Top-{TOP_K} ranking, got {n_classes}"
        )
    fill = datagen.mean_color(dataset)
    _, labels = dataset.stacked()

    intact_pred = _dataset_predictions(dataset, model, predict_fn, batch_size)
    intact = iou_per_class(intact_pred, labels, n_classes)

    iou_by_eraser = np.full((n_classes, n_classes), np.nan)
    for eraser in range(n_classes):
        erased = [datagen.erase_class(s, eraser, fill) for s in dataset.samples]
        erased_ds = datagen.Dataset(erased, dataset.spec, split=dataset.split)
        erased_labels = np.stack([s.label for s in erased])
        pred = _dataset_predictions(erased_ds, model, predict_fn, batch_size)
        iou_by_eraser[eraser] = iou_per_class(pred, erased_labels, n_classes).iou

    evaluated = [c for c in range(n_classes) if intact.present[c]]
    chosen: dict[int, tuple] = {}
    if top3 is None:
        for y in evaluated:
            drops = []
            for x in range(n_classes):
                if x == y:
                    continue
                erased_iou = iou_by_eraser[x, y]
                drop = intact.iou[y] - erased_iou if np.isfinite(erased_iou) else -np.inf
                drops.append((-drop, x))
            drops.sort()
            chosen[y] = tuple(x for _, x in drops[:TOP_K])
    else:
        for y in evaluated:
            if y not in top3:
                raise ProtocolError(f"reference Top-{TOP_K} sets lack class {y}")
            chosen[y] = tuple(top3[y])

    rows = []
    for y in evaluated:
        erased_vals = iou_by_eraser[list(chosen[y]), y]
        erased_vals = erased_vals[np.isfinite(erased_vals)]
        iou_star = float(erased_vals.mean()) if erased_vals.size else float("nan")
        rows.append(
            ErasureRow(
                class_index=y,
                top3=chosen[y],
                iou_intact=float(intact.iou[y]),
                iou_erased=iou_star,
            )
        )
    stars = np.array([r.iou_erased for r in rows])
    stars = stars[np.isfinite(stars)]
    return ErasureReport(
        rows=tuple(rows),
        miou_intact=intact.miou,
        miou_erased=float(stars.mean()) if stars.size else float("nan"),
        top3=chosen,
        iou_by_eraser=iou_by_eraser,
    )


# -- classifier weight correlation ------------------------------------------


@dataclass(frozen=True, eq=False)
class CorrelationReport:
    matrix: np.ndarray     # [C, C] cosine similarities, symmetric
    row_sums: np.ndarray   # [C] non-diagonal row sums


def weight_correlation(model) -> CorrelationReport:
    """Cosine similarity between the classifier's per-class weight rows.

    High off-diagonal mass means classes share feature directions, the
    signature of entangled representations.
    """
    kernel = model.params["classifier_kernel"]
    k, c = kernel.shape[2], kernel.shape[3]
    rows = kernel.reshape(k, c).T.astype(np.float64)
    norms = np.linalg.norm(rows, axis=1)
    for idx, n in enumerate(norms):
        if n == 0.0:
            raise ProtocolError(
                f"classifier weight row for class {idx} has zero norm; cosine undefined"
            )
    matrix = (rows @ rows.T) / np.outer(norms, norms)
    matrix = np.clip((matrix + matrix.T) / 2.0, -1.0, 1.0)
    row_sums = matrix.sum(axis=1) - np.diag(matrix)
    return CorrelationReport(matrix=matrix, row_sums=row_sums)


# -- importance-map export --------------------------------------------------


def gradcam_map(model, x: np.ndarray, c: int) -> tuple[np.ndarray, np.ndarray]:
    """(normalized, raw) channel-summed importance-weighted activation map.

    raw_{i,j} = relu(sum_k S^c_{i,j,k} * A_{i,j,k}); normalized divides by
    the max so values land in [0, 1], with an all-zero map left at zero.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise DimensionError(f"expected single [h, w, channels] image, got {x.shape}")
    a = model_mod.extract_features(model, x)
    s = importance_map(model, a, c)
    raw = np.maximum((s * a).sum(axis=-1), 0.0).astype(np.float64)
    peak = raw.max()
    normalized = raw / peak if peak > 0 else raw.copy()
    return normalized, raw


def export_gradcam(model, x: np.ndarray, c: int, path) -> np.ndarray:
    """Write the class-c importance map as plain-text graymap plus raw CSV.

    `path` names the graymap; the raw values go to the same name with a
    .csv suffix. Returns the normalized map.
    """
    normalized, raw = gradcam_map(model, x, c)
    h, w = normalized.shape
    gray = np.rint(normalized * 255).astype(np.int64)
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in gray]
    atomic_write_text(path, "\n".join(lines) + "\n")
    csv = "\n".join(",".join(_fmt(v) for v in row) for row in raw) + "\n"
    base, _ = os.path.splitext(os.fspath(path))
    atomic_write_text(base + ".csv", csv)
    return normalized


# -- CSV rendering -----------------------------------------------------------


def _names(n_classes: int, names=None) -> list:
    if names is None:
        return [f"class_{i}" for i in range(n_classes)]
    if len(names) != n_classes:
        raise DimensionError(f"expected {n_classes} class names, got {len(names)}")
    return list(names)


def render_iou_csv(report: IoUReport, names=None) -> str:
    n = report.iou.shape[0]
    names = _names(n, names)
    dagger = set(report.dagger_classes or ())
    lines = ["class,iou,present,dagger_member,train_frequency"]
    for i in range(n):
        iou = _fmt(report.iou[i]) if report.present[i] else ""
        freq = _fmt(report.frequencies[i]) if report.frequencies is not None else ""
        lines.append(f"{names[i]},{iou},{int(report.present[i])},{int(i in dagger)},{freq}")
    lines.append(f"miou,{_fmt(report.miou)},,,")
    if report.miou_dagger is not None:
        lines.append(f"miou_dagger,{_fmt(report.miou_dagger)},,,")
    return "\n".join(lines) + "\n"


def render_erasure_csv(report: ErasureReport, names=None) -> str:
    n = report.iou_by_eraser.shape[0]
    names = _names(n, names)
    lines = ["class,top3_erasers,iou_intact,iou_erased,delta"]
    for r in report.rows:
        erasers = "|".join(names[x] for x in r.top3)
        lines.append(
            f"{names[r.class_index]},{erasers},{_fmt(r.iou_intact)},"
            f"{_fmt(r.iou_erased)},{_fmt(r.delta)}"
        )
    lines.append(f"miou_intact,,{_fmt(report.miou_intact)},,")
    lines.append(f"miou_erased,,,{_fmt(report.miou_erased)},")
    return "\n".join(lines) + "\n"


def parse_erasure_top3(csv_text: str, names) -> dict:
    """Recover the Top-3 eraser sets from a rendered erasure CSV.

    Used to score a comparison model on the same sets a reference model
    selected. Aggregate rows (miou_*) are skipped.
    """
    index = {name: i for i, name in enumerate(names)}
    top3: dict[int, tuple] = {}
    lines = csv_text.splitlines()
    if not lines or lines[0] != "class,top3_erasers,iou_intact,iou_erased,delta":
        raise ProtocolError("reference report is not an erasure CSV")
    for line in lines[1:]:
        fields = line.split(",")
        if not fields or fields[0].startswith("miou"):
            continue
        if fields[0] not in index:
            raise ProtocolError(f"reference report names unknown class {fields[0]!r}")
        erasers = fields[1].split("|")
        unknown = [e for e in erasers if e not in index]
        if unknown:
            raise ProtocolError(f"reference report names unknown classes {unknown}")
        top3[index[fields[0]]] = tuple(index[e] for e in erasers)
    if not top3:
        raise ProtocolError("reference report holds no per-class rows")
    return top3


def render_correlation_csv(report: CorrelationReport, names=None) -> str:
    n = report.matrix.shape[0]
    names = _names(n, names)
    lines = ["class," + ",".join(names) + ",row_sum_offdiag"]
    for i in range(n):
        row = ",".join(_fmt(v) for v in report.matrix[i])
        lines.append(f"{names[i]},{row},{_fmt(report.row_sums[i])}")
    return "\n".join(lines) + "\n"
