"""Synthetic street-scene benchmark with controllable co-occurrence bias.

Scenes are 64x64 RGB layouts: a sky band, a dominant road band, and small
shapes (car, bike, rider) whose presence, size, and placement are drawn per
sample. Co-occurrence rules install the bias under study: with probability
rho a subject class appears in a stereotyped spatial relation to its
companion (rider directly above bike, car directly above road); otherwise
the subject is placed independently and the companion is removed from the
scene. rho=1 makes the context cue perfectly reliable, which is exactly the
shortcut a context-hungry model will learn.

The rider's color is deliberately close to the car's so that appearance
alone barely separates them; shape size and immediate surroundings have to
carry the distinction once the bike context is gone.

Everything is a pure function of (spec, seed); datasets regenerate
byte-identically.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, GenerationError
from .tensor import IGNORE_LABEL, atomic_write_text, load_labels, load_tensor, save_labels, save_tensor

FAMILIES = ("fill", "band", "rectangle", "disc")
RELATIONS = ("above", "overlapping", "adjacent")
MAX_PLACEMENT_RETRIES = 100


@dataclass(frozen=True)
class ClassSpec:
    name: str
    family: str
    size_range: tuple  # band: (lo, hi) thickness; rect: (wlo, whi, hlo, hhi); disc: (rlo, rhi)
    color: tuple
    jitter: float = 0.04
    presence: float = 1.0
    y_range: tuple = (0.0, 1.0)  # fraction of image height the shape center may occupy
    band_side: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"class {self.name!r}: unknown family {self.family!r}")
        if self.family == "band" and self.band_side not in ("top", "bottom"):
            raise ConfigError(f"band class {self.name!r} needs band_side top or bottom")
        want = {"fill": 0, "band": 2, "rectangle": 4, "disc": 2}[self.family]
        if len(self.size_range) != want:
            raise ConfigError(
                f"class {self.name!r}: family {self.family!r} takes {want} size numbers"
            )
        if len(self.color) != 3:
            raise ConfigError(f"class {self.name!r}: color must be RGB")
        if not 0.0 <= self.presence <= 1.0:
            raise ConfigError(f"class {self.name!r}: presence must be in [0, 1]")


@dataclass(frozen=True)
class Rule:
    subject: int
    companion: int
    rho: float
    relation: str

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rule rho must be in [0, 1], got {self.rho}")
        if self.relation not in RELATIONS:
            raise ConfigError(f"unknown relation {self.relation!r}")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int
    classes: tuple
    rules: tuple = ()
    frequency_targets: tuple = ()
    background: int = 0
    noise_sigma: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "frequency_targets", tuple(self.frequency_targets))
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if not self.classes:
            raise ConfigError("SceneSpec needs at least one class")
        if not 0 <= self.background < len(self.classes):
            raise ConfigError(f"background index {self.background} out of range")
        if self.classes[self.background].family != "fill":
            raise ConfigError("background class must have family 'fill'")
        n = len(self.classes)
        for rule in self.rules:
            if not (0 <= rule.subject < n and 0 <= rule.companion < n):
                raise ConfigError(f"rule references unknown class: {rule}")
            if rule.companion >= rule.subject:
                # placement happens in class-index order, companions first
                raise ConfigError(
                    f"rule companion index must precede subject index: {rule}"
                )
        if self.frequency_targets:
            if len(self.frequency_targets) != n:
                raise ConfigError("frequency_targets length must match class count")
            if sum(self.frequency_targets) > 1.0 + 1e-9:
                raise ConfigError("frequency_targets must sum to <= 1")

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass(eq=False)
class Sample:
    image: np.ndarray  # [h, w, 3] float32 in [0, 1]
    label: np.ndarray  # [h, w] uint8, IGNORE_LABEL allowed
    seed: int


@dataclass(eq=False)
class Dataset:
    samples: list
    spec: SceneSpec
    split: str = "train"
    base_seed: int | None = None

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        images = np.stack([s.image for s in self.samples])
        labels = np.stack([s.label for s in self.samples])
        return images, labels


def default_benchmark_spec(rider_rho: float = 1.0) -> SceneSpec:
    """The 6-class biased benchmark used throughout.

    Pixel shares are wildly imbalanced on purpose (road ~0.37 of all pixels,
    rider ~0.002) and the rider co-occurs with the bike with probability
    rider_rho.
    """
    classes = (
        ClassSpec("background", "fill", (), (0.50, 0.52, 0.55), jitter=0.03),
        ClassSpec("sky", "band", (12, 20), (0.55, 0.75, 0.95), band_side="top"),
        ClassSpec("road", "band", (20, 28), (0.24, 0.24, 0.28), band_side="bottom"),
        ClassSpec("car", "rectangle", (10, 16, 6, 10), (0.80, 0.12, 0.12),
                  presence=0.65, y_range=(0.35, 0.58)),
        ClassSpec("bike", "disc", (2.5, 4.0), (0.10, 0.70, 0.65),
                  presence=0.5, y_range=(0.66, 0.86)),
        ClassSpec("rider", "rectangle", (4, 6, 5, 8), (0.70, 0.18, 0.30),
                  presence=0.35, y_range=(0.35, 0.58)),
    )
    rules = (
        Rule(subject=5, companion=4, rho=rider_rho, relation="above"),
        Rule(subject=3, companion=2, rho=1.0, relation="above"),
    )
    targets = (0.354, 0.252, 0.368, 0.016, 0.0055, 0.0026)
    return SceneSpec(64, classes, rules, targets)


# -- generation ---------------------------------------------------------------


def _draw_color(rng, cls: ClassSpec) -> np.ndarray:
    color = np.asarray(cls.color, dtype=np.float64) + rng.uniform(-cls.jitter, cls.jitter, 3)
    return np.clip(color, 0.0, 1.0).astype(np.float32)


def _bbox(geom) -> tuple[int, int, int, int]:
    kind = geom[0]
    if kind == "band":
        _, y0, y1, w = geom
        return y0, y1, 0, w
    if kind == "rect":
        _, y0, y1, x0, x1 = geom
        return y0, y1, x0, x1
    _, cy, cx, r = geom
    return int(np.floor(cy - r)), int(np.ceil(cy + r)) + 1, int(np.floor(cx - r)), int(np.ceil(cx + r)) + 1


def _place(rng, cls: ClassSpec, rule, geoms, size: int):
    """Draw a shape geometry, honoring the rule's spatial relation if any.

    Retries with fresh draws; a consistently infeasible layout is a spec
    problem and surfaces as GenerationError.
    """
    if cls.family == "band":
        lo, hi = cls.size_range
        t = int(rng.integers(int(lo), int(hi) + 1))
        if cls.band_side == "top":
            return ("band", 0, t, size)
        return ("band", size - t, size, size)

    for _ in range(MAX_PLACEMENT_RETRIES):
        if cls.family == "rectangle":
            wlo, whi, hlo, hhi = cls.size_range
            w = int(rng.integers(int(wlo), int(whi) + 1))
            h = int(rng.integers(int(hlo), int(hhi) + 1))
            half_w = w / 2.0
        else:  # disc
            rlo, rhi = cls.size_range
            r = float(rng.uniform(rlo, rhi))
            w = h = int(np.ceil(2 * r))
            half_w = r

        if rule is None:
            if half_w > size - half_w:
                continue  # shape wider than the canvas; let the retry cap report it
            ylo, yhi = cls.y_range
            cy = float(rng.uniform(ylo * size, yhi * size))
            cx = float(rng.uniform(half_w, size - half_w))
        else:
            cy0, _, cx0, cx1 = _bbox(geoms[rule.companion])
            xlo, xhi = max(half_w, float(cx0)), min(size - half_w, float(cx1))
            if xlo >= xhi:
                continue
            cx = float(rng.uniform(xlo, xhi))
            gap = int(rng.integers(0, 3))
            cy = cy0 - gap - h / 2.0  # bottom edge sits just above the companion

        if cls.family == "disc":
            r_ = half_w
            if cy - r_ < 0 or cy + r_ > size or cx - r_ < 0 or cx + r_ > size:
                continue
            return ("disc", cy, cx, r_)
        y0, x0 = int(round(cy - h / 2.0)), int(round(cx - w / 2.0))
        y1, x1 = y0 + h, x0 + w
        if y0 < 0 or y1 > size or x0 < 0 or x1 > size:
            continue
        return ("rect", y0, y1, x0, x1)

    where = (
        f"class {cls.name!r}"
        if rule is None
        else f"class {cls.name!r} under rule ({rule.subject} {rule.relation} {rule.companion})"
    )
    raise GenerationError(f"no feasible placement for {where} after {MAX_PLACEMENT_RETRIES} tries")


def _paint(image, label, idx, color, geom):
    kind = geom[0]
    if kind == "band" or kind == "rect":
        y0, y1, x0, x1 = _bbox(geom)
        image[y0:y1, x0:x1] = color
        label[y0:y1, x0:x1] = idx
        return
    _, cy, cx, r = geom
    yy = np.arange(image.shape[0])[:, None]
    xx = np.arange(image.shape[1])[None, :]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    image[mask] = color
    label[mask] = idx


def generate_sample(spec: SceneSpec, seed: int) -> Sample:
    """One scene, fully determined by (spec, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    size = spec.image_size

    present = {}
    for idx, cls in enumerate(spec.classes):
        if idx == spec.background:
            present[idx] = True
            continue
        present[idx] = bool(rng.random() < cls.presence)

    relations = {}
    for rule in spec.rules:
        if not present[rule.subject]:
            continue
        if rng.random() < rule.rho:
            present[rule.companion] = True
            relations[rule.subject] = rule
        else:
            present[rule.companion] = False

    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = _draw_color(rng, spec.classes[spec.background])
    label = np.full((size, size), spec.background, dtype=np.uint8)

    geoms = {}
    for idx, cls in enumerate(spec.classes):
        if idx == spec.background or not present[idx]:
            continue
        geom = _place(rng, cls, relations.get(idx), geoms, size)
        _paint(image, label, idx, _draw_color(rng, cls), geom)
        geoms[idx] = geom

    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, image.shape).astype(np.float32)
        np.clip(image, 0.0, 1.0, out=image)
    return Sample(image, label, int(seed))


def generate_dataset(spec: SceneSpec, n: int, base_seed: int, split: str = "train") -> Dataset:
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    samples = [generate_sample(spec, base_seed + i) for i in range(n)]
    return Dataset(samples, spec, split, base_seed=base_seed)


# -- statistics and manipulations ---------------------------------------------


def pixel_frequencies(dataset: Dataset) -> np.ndarray:
    """Per-class share of all non-ignored pixels across the dataset."""
    if not dataset.samples:
        raise ConfigError("pixel_frequencies needs a non-empty dataset")
    n = dataset.n_classes
    counts = np.zeros(n, dtype=np.int64)
    for sample in dataset.samples:
        flat = sample.label[sample.label != IGNORE_LABEL]
        counts += np.bincount(flat, minlength=n)[:n]
    total = counts.sum()
    if total == 0:
        raise ConfigError("dataset has no labeled pixels")
    return counts / total


def median_frequency_weights(frequencies) -> np.ndarray:
    """weight_c = median(f) / f_c; rare classes get large weights."""
    frequencies = np.asarray(frequencies, dtype=np.float64)
    if (frequencies <= 0).any():
        absent = int(np.argmin(frequencies))
        raise ConfigError(
            f"class {absent} has zero pixel frequency; cannot reweight an absent class"
        )
    return np.median(frequencies) / frequencies


def mean_color(dataset: Dataset) -> np.ndarray:
    if not dataset.samples:
        raise ConfigError("mean_color needs a non-empty dataset")
    return np.mean([s.image.mean(axis=(0, 1)) for s in dataset.samples], axis=0).astype(np.float32)


def erase_class(sample: Sample, c: int, fill_color=None) -> Sample:
    """Remove class c: fill its pixels with a flat color, mark them ignored.

    fill_color should be the dataset mean color; without one the sample's own
    mean is used.
    """
    mask = sample.label == c
    if fill_color is None:
        fill_color = sample.image.mean(axis=(0, 1))
    image = sample.image.copy()
    label = sample.label.copy()
    image[mask] = np.asarray(fill_color, dtype=np.float32)
    label[mask] = IGNORE_LABEL
    return Sample(image, label, sample.seed)


def resample_with_duplication(dataset: Dataset, c: int) -> Dataset:
    """Every sample containing class c appears twice, in place."""
    samples = []
    for sample in dataset.samples:
        samples.append(sample)
        if (sample.label == c).any():
            samples.append(sample)
    return Dataset(samples, dataset.spec, dataset.split, base_seed=dataset.base_seed)


# -- on-disk layout ------------------------------------------------------------


def _spec_dict(spec: SceneSpec) -> dict:
    return {
        "format": 1,
        "image_size": spec.image_size,
        "background": spec.background,
        "noise_sigma": spec.noise_sigma,
        "classes": [
            {
                "name": c.name,
                "family": c.family,
                "size_range": list(c.size_range),
                "color": list(c.color),
                "jitter": c.jitter,
                "presence": c.presence,
                "y_range": list(c.y_range),
                "band_side": c.band_side,
            }
            for c in spec.classes
        ],
        "rules": [
            {"subject": r.subject, "companion": r.companion, "rho": r.rho, "relation": r.relation}
            for r in spec.rules
        ],
        "frequency_targets": list(spec.frequency_targets),
    }


def _spec_from_dict(d: dict, path) -> SceneSpec:
    if d.get("format") != 1:
        raise FormatError(f"{path}: unsupported dataset spec format {d.get('format')!r}")
    try:
        classes = tuple(
            ClassSpec(
                name=c["name"],
                family=c["family"],
                size_range=tuple(c["size_range"]),
                color=tuple(c["color"]),
                jitter=c["jitter"],
                presence=c["presence"],
                y_range=tuple(c["y_range"]),
                band_side=c.get("band_side"),
            )
            for c in d["classes"]
        )
        rules = tuple(
            Rule(r["subject"], r["companion"], r["rho"], r["relation"]) for r in d["rules"]
        )
        return SceneSpec(
            image_size=d["image_size"],
            classes=classes,
            rules=rules,
            frequency_targets=tuple(d["frequency_targets"]),
            background=d["background"],
            noise_sigma=d["noise_sigma"],
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed scene spec ({exc!r})") from exc


def save_dataset(dataset: Dataset, root) -> None:
    """Write `<root>/<split>/img_<i>.dct1` + `lab_<i>.dcl1` and update spec.json.

    Several splits of the same spec share one root; writing a split with a
    different spec than the recorded one is rejected.
    """
    root = os.fspath(root)
    split_dir = os.path.join(root, dataset.split)
    os.makedirs(split_dir, exist_ok=True)

    spec_path = os.path.join(root, "spec.json")
    doc = {"spec": _spec_dict(dataset.spec), "splits": {}}
    if os.path.exists(spec_path):
        with open(spec_path) as fh:
            try:
                existing = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{spec_path}: not valid JSON ({exc})") from exc
        if existing.get("spec") != doc["spec"]:
            raise ConfigError(f"{spec_path} records a different scene spec; use a fresh directory")
        doc = existing
    doc["splits"][dataset.split] = {
        "count": len(dataset.samples),
        "base_seed": dataset.base_seed,
    }

    for i, sample in enumerate(dataset.samples):
        save_tensor(sample.image, os.path.join(split_dir, f"img_{i}.dct1"))
        save_labels(sample.label, os.path.join(split_dir, f"lab_{i}.dcl1"))
    atomic_write_text(spec_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_dataset(root, split: str) -> Dataset:
    root = os.fspath(root)
    spec_path = os.path.join(root, "spec.json")
    if not os.path.exists(spec_path):
        raise FormatError(f"{spec_path}: missing dataset spec")
    with open(spec_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{spec_path}: not valid JSON ({exc})") from exc
    spec = _spec_from_dict(doc.get("spec", {}), spec_path)
    splits = doc.get("splits", {})
    if split not in splits:
        raise FormatError(f"{spec_path}: no split {split!r} recorded (have {sorted(splits)})")
    count = int(splits[split]["count"])
    base_seed = splits[split].get("base_seed")

    samples = []
    split_dir = os.path.join(root, split)
    for i in range(count):
        img_path = os.path.join(split_dir, f"img_{i}.dct1")
        lab_path = os.path.join(split_dir, f"lab_{i}.dcl1")
        if not os.path.exists(img_path) or not os.path.exists(lab_path):
            raise FormatError(f"{split_dir}: sample {i} files missing")
        image = load_tensor(img_path)
        label = load_labels(lab_path)
        seed = (base_seed + i) if base_seed is not None else -1
        samples.append(Sample(image, label.astype(np.uint8), seed))
    return Dataset(samples, spec, split, base_seed=base_seed)
