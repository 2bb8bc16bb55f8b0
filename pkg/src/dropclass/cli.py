"""Command-line pipeline driver.

Every subcommand reads a flat key=value config, writes all artifacts
atomically under --out, and finishes by emitting a manifest sufficient to
replay the run bit-exactly (see manifest.py). Seed precedence:
--seed flag > config `seed` key > DROPCLASS_SEED env var > 0.
"""

import argparse
import os
import sys

from . import __version__, datagen, evaluate, gradcheck
from . import config as config_mod
from . import manifest as manifest_mod
from . import model as model_mod
from . import trainer
from .config import get_bool, get_float, get_int, get_int_list, get_str, get_str_list
from .tensor import atomic_write_text
from .errors import (
    ConfigError,
    DimensionError,
    DropClassError,
    FormatError,
    GenerationError,
    ManifestError,
    NonFiniteError,
    ProtocolError,
    TrainingDiverged,
)

_ERROR_AREAS = {
    DimensionError: "tensor",
    NonFiniteError: "tensor",
    FormatError: "io",
    GenerationError: "datagen",
    ConfigError: "config",
    TrainingDiverged: "trainer",
    ProtocolError: "evaluate",
    ManifestError: "manifest",
}

DEFAULT_SPLIT_COUNTS = {"train": 2000, "val": 400, "test": 400}


def _resolve_seed(flag_seed, cfg: dict) -> int:
    if flag_seed is not None:
        return flag_seed
    if "seed" in cfg:
        return get_int(cfg, "seed")
    env = os.environ.get("DROPCLASS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"DROPCLASS_SEED must be an integer, got {env!r}") from exc
    return 0


def _load_cfg(args) -> dict:
    return config_mod.load_config(args.config) if args.config else {}


def _class_names(dataset) -> list:
    return [c.name for c in dataset.spec.classes]


def _resolve_class(value, names, what: str) -> int:
    """Accept a class by name or by index."""
    if value in names:
        return names.index(value)
    try:
        idx = int(value)
    except ValueError:
        raise ConfigError(f"{what}: unknown class {value!r}; known: {names}") from None
    if not 0 <= idx < len(names):
        raise ConfigError(f"{what}: class index {idx} out of range for {len(names)} classes")
    return idx


def _emit_manifest(args, seed, resolved_cfg: dict, inputs) -> None:
    m = manifest_mod.Manifest(
        subcommand=args.subcommand,
        seed=seed,
        config={k: str(v) for k, v in resolved_cfg.items() if v is not None},
        inputs=manifest_mod.hash_inputs(inputs),
        outputs=manifest_mod.hash_tree(args.out),
    )
    manifest_mod.write_manifest(m, args.out)


def _progress(args):
    if not args.verbose:
        return None

    def report(t, total, row):
        if t % 100 == 0 or t == total - 1:
            print(f"iter {t}/{total} l_total={row.l_total:.4f}", file=sys.stderr)

    return report


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    config_mod.check_keys(
        cfg,
        {"seed", "rho", "splits"}
        | {f"{s}_count" for s in get_str_list(cfg, "splits", ("train", "test"))}
        | {f"{s}_seed" for s in get_str_list(cfg, "splits", ("train", "test"))},
    )
    seed = _resolve_seed(args.seed, cfg)
    rho = get_float(cfg, "rho", 1.0)
    splits = get_str_list(cfg, "splits", ("train", "test"))
    spec = datagen.default_benchmark_spec(rider_rho=rho)

    resolved = {"seed": seed, "rho": rho, "splits": ",".join(splits)}
    next_seed = seed * 1_000_003 + 1
    for split in splits:
        count = get_int(cfg, f"{split}_count", DEFAULT_SPLIT_COUNTS.get(split, 200))
        base = get_int(cfg, f"{split}_seed", None)
        if base is None:
            base = next_seed
        next_seed = base + count  # keep later splits' sample seeds disjoint
        dataset = datagen.generate_dataset(spec, count, base, split=split)
        datagen.save_dataset(dataset, args.out)
        resolved[f"{split}_count"] = count
        resolved[f"{split}_seed"] = base
    _emit_manifest(args, seed, resolved, inputs=())
    return 0


_TRAIN_KEYS = {
    "seed", "data_dir", "split", "mode", "iterations", "batch_size", "lr",
    "momentum", "alpha", "reweighting", "resample_class",
    "widths", "kernel_size", "feature_channels", "comp_kernel_size",
}


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    config_mod.check_keys(cfg, _TRAIN_KEYS)
    seed = _resolve_seed(args.seed, cfg)
    data_dir = get_str(cfg, "data_dir")
    split = get_str(cfg, "split", "train")
    dataset = datagen.load_dataset(data_dir, split)
    names = _class_names(dataset)

    mode = args.mode or get_str(cfg, "mode", "baseline")
    resample = cfg.get("resample_class")
    if resample is not None:
        resample = _resolve_class(resample, names, "resample_class")

    model_cfg = None
    if any(k in cfg for k in ("widths", "kernel_size", "feature_channels", "comp_kernel_size")):
        widths = get_int_list(cfg, "widths", (16, 32, 32))
        model_cfg = model_mod.ModelConfig(
            n_classes=dataset.n_classes,
            widths=widths,
            kernel_size=get_int(cfg, "kernel_size", 3),
            feature_channels=get_int(cfg, "feature_channels", widths[-1]),
            comp_kernel_size=get_int(cfg, "comp_kernel_size", 1),
            expected_resolution=dataset.spec.image_size,
        )

    train_cfg = trainer.TrainConfig(
        mode=mode,
        total_iterations=get_int(cfg, "iterations", None),
        batch_size=get_int(cfg, "batch_size", 8),
        lr=get_float(cfg, "lr", 0.05),
        momentum=get_float(cfg, "momentum", 0.9),
        alpha=get_float(cfg, "alpha", 10.0),
        reweighting=get_bool(cfg, "reweighting", False),
        resample_class=resample,
        seed=seed,
        model=model_cfg,
    ).resolved(dataset)

    report = trainer.train(dataset, train_cfg, out_dir=args.out, progress=_progress(args))
    trainer.write_trace(report.trace, os.path.join(args.out, "trace.csv"))
    model_mod.save_checkpoint(report.model, os.path.join(args.out, "model.dcm1"))

    resolved = {
        "seed": seed, "data_dir": data_dir, "split": split, "mode": mode,
        "iterations": train_cfg.total_iterations, "batch_size": train_cfg.batch_size,
        "lr": train_cfg.lr, "momentum": train_cfg.momentum, "alpha": train_cfg.alpha,
        "reweighting": int(train_cfg.reweighting),
        "resample_class": resample,
        "widths": ",".join(str(w) for w in train_cfg.model.widths),
        "kernel_size": train_cfg.model.kernel_size,
        "feature_channels": train_cfg.model.feature_channels,
        "comp_kernel_size": train_cfg.model.comp_kernel_size,
    }
    _emit_manifest(args, seed, resolved, inputs=(data_dir,))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    config_mod.check_keys(cfg, {"seed", "data_dir", "split", "train_split", "checkpoint"})
    seed = _resolve_seed(args.seed, cfg)
    data_dir = get_str(cfg, "data_dir")
    split = get_str(cfg, "split", "test")
    train_split = get_str(cfg, "train_split", "train")
    checkpoint = get_str(cfg, "checkpoint")

    dataset = datagen.load_dataset(data_dir, split)
    train_ds = datagen.load_dataset(data_dir, train_split)
    model = model_mod.load_checkpoint(checkpoint, n_classes=dataset.n_classes)
    frequencies = datagen.pixel_frequencies(train_ds)

    images, labels = dataset.stacked()
    predictions = evaluate.predict_labels(model, images)
    report = evaluate.iou_per_class(predictions, labels, dataset.n_classes, frequencies)
    atomic_write_text(
        os.path.join(args.out, "iou.csv"),
        evaluate.render_iou_csv(report, names=_class_names(dataset)),
    )
    resolved = {
        "seed": seed, "data_dir": data_dir, "split": split,
        "train_split": train_split, "checkpoint": checkpoint,
    }
    _emit_manifest(args, seed, resolved, inputs=(data_dir, checkpoint))
    return 0


def cmd_erase_bench(args) -> int:
    cfg = _load_cfg(args)
    config_mod.check_keys(cfg, {"seed", "data_dir", "split", "checkpoint", "reference_report"})
    seed = _resolve_seed(args.seed, cfg)
    data_dir = get_str(cfg, "data_dir")
    split = get_str(cfg, "split", "test")
    checkpoint = get_str(cfg, "checkpoint")
    reference = get_str(cfg, "reference_report", None)

    dataset = datagen.load_dataset(data_dir, split)
    names = _class_names(dataset)
    model = model_mod.load_checkpoint(checkpoint, n_classes=dataset.n_classes)
    top3 = None
    if reference is not None:
        with open(reference, "r", encoding="utf-8") as fh:
            top3 = evaluate.parse_erasure_top3(fh.read(), names)
    report = evaluate.erasure_benchmark(model, dataset, top3=top3)
    atomic_write_text(
        os.path.join(args.out, "erasure.csv"),
        evaluate.render_erasure_csv(report, names=names),
    )
    resolved = {
        "seed": seed, "data_dir": data_dir, "split": split,
        "checkpoint": checkpoint, "reference_report": reference,
    }
    inputs = [data_dir, checkpoint] + ([reference] if reference else [])
    _emit_manifest(args, seed, resolved, inputs=inputs)
    return 0


def cmd_correlate(args) -> int:
    cfg = _load_cfg(args)
    config_mod.check_keys(cfg, {"seed", "checkpoint", "data_dir"})
    seed = _resolve_seed(args.seed, cfg)
    checkpoint = get_str(cfg, "checkpoint")
    data_dir = get_str(cfg, "data_dir", None)

    names = None
    inputs = [checkpoint]
    if data_dir is not None:
        names = _class_names(datagen.load_dataset(data_dir, "train"))
        inputs.append(data_dir)
    model = model_mod.load_checkpoint(checkpoint)
    report = evaluate.weight_correlation(model)
    atomic_write_text(
        os.path.join(args.out, "correlation.csv"),
        evaluate.render_correlation_csv(report, names=names),
    )
    resolved = {"seed": seed, "checkpoint": checkpoint, "data_dir": data_dir}
    _emit_manifest(args, seed, resolved, inputs=inputs)
    return 0


def cmd_gradcam(args) -> int:
    cfg = _load_cfg(args)
    config_mod.check_keys(cfg, {"seed", "data_dir", "split", "checkpoint", "sample_index", "class"})
    seed = _resolve_seed(args.seed, cfg)
    data_dir = get_str(cfg, "data_dir")
    split = get_str(cfg, "split", "test")
    checkpoint = get_str(cfg, "checkpoint")
    sample_index = get_int(cfg, "sample_index", 0)

    dataset = datagen.load_dataset(data_dir, split)
    names = _class_names(dataset)
    class_index = _resolve_class(get_str(cfg, "class"), names, "class")
    if not 0 <= sample_index < len(dataset.samples):
        raise ConfigError(
            f"sample_index {sample_index} out of range for {len(dataset.samples)} samples"
        )
    model = model_mod.load_checkpoint(checkpoint, n_classes=dataset.n_classes)
    sample = dataset.samples[sample_index]
    out_path = os.path.join(args.out, f"gradcam_{names[class_index]}_{sample_index}.pgm")
    evaluate.export_gradcam(model, sample.image, class_index, out_path)
    resolved = {
        "seed": seed, "data_dir": data_dir, "split": split, "checkpoint": checkpoint,
        "sample_index": sample_index, "class": names[class_index],
    }
    _emit_manifest(args, seed, resolved, inputs=(data_dir, checkpoint))
    return 0


def cmd_grad_check(args) -> int:
    cfg = _load_cfg(args)
    config_mod.check_keys(cfg, {"seed"})
    seed = _resolve_seed(args.seed, cfg)
    results = gradcheck.run_all(seed=seed)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    atomic_write_text(os.path.join(args.out, "gradcheck.txt"), "\n".join(lines) + "\n")
    _emit_manifest(args, seed, {"seed": seed}, inputs=())
    if all(r.ok for r in results):
        return 0
    print("gradient check failed", file=sys.stderr)
    return 1


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dropclass",
        description="Class-drop training laboratory: data generation, training, "
        "evaluation, and bias analysis.",
    )
    parser.add_argument("--version", action="version", version=f"dropclass {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    handlers = {
        "gen-data": (cmd_gen_data, "generate the synthetic benchmark dataset"),
        "train": (cmd_train, "train a model and write trace + checkpoint"),
        "eval": (cmd_eval, "per-class IoU table for a checkpoint"),
        "erase-bench": (cmd_erase_bench, "class-erasure influence benchmark"),
        "correlate": (cmd_correlate, "classifier weight cosine correlation"),
        "gradcam": (cmd_gradcam, "export a class importance map"),
        "grad-check": (cmd_grad_check, "finite-difference gradient audit"),
    }
    for name, (handler, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", required=True, help="output directory (all writes land here)")
        p.add_argument("--seed", type=int, help="seed override; wins over config and env")
        p.add_argument("--threads", type=int, default=1,
                       help="batch parallelism (this build always runs single-threaded)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--mode", choices=trainer.MODES,
                           help="training mode override; wins over config")
        p.set_defaults(handler=handler)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads > 1:
        print(
            "warning: --threads > 1 requested but this build is single-threaded; "
            "running deterministically on one thread",
            file=sys.stderr,
        )
    try:
        os.makedirs(args.out, exist_ok=True)
        return args.handler(args)
    except DropClassError as exc:
        area = _ERROR_AREAS.get(type(exc), "dropclass")
        print(f"error [{area}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
