"""Experiment manifests: everything needed to replay a run bit-exactly.

A manifest records the resolved config, the seed, the package version, and
sha256 hashes of every input and output file. Replaying re-executes the
subcommand from the embedded config and fails loudly if any input changed
or any output hash differs.

Format: UTF-8 lines of tab-separated (kind, key, value) triples; `kind` is
meta | config | input | output. Tabs keep paths with spaces, '#' or '='
unambiguous.
"""

import hashlib
import os
from dataclasses import dataclass, field

from . import __version__
from .errors import ManifestError
from .tensor import atomic_write_text

MANIFEST_NAME = "manifest.txt"
REPLAY_CONFIG = "replay.cfg"
_EXCLUDED = (MANIFEST_NAME, REPLAY_CONFIG)


@dataclass
class Manifest:
    subcommand: str
    seed: int | None
    config: dict = field(default_factory=dict)   # resolved key -> value strings
    inputs: dict = field(default_factory=dict)   # path as given -> sha256
    outputs: dict = field(default_factory=dict)  # path relative to out -> sha256
    version: str = __version__


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _walk_files(root):
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            yield os.path.join(dirpath, name)


def hash_tree(root, exclude=_EXCLUDED) -> dict:
    """sha256 per file under root, keyed by /-separated relative path."""
    root = os.fspath(root)
    out = {}
    for path in _walk_files(root):
        rel = os.path.relpath(path, root).replace(os.sep, "/")
        if rel in exclude:
            continue
        out[rel] = sha256_file(path)
    return out


def hash_inputs(paths) -> dict:
    """Hashes for input files; directories expand to their file trees."""
    out = {}
    for given in paths:
        given = os.fspath(given)
        if os.path.isdir(given):
            for path in _walk_files(given):
                out[path.replace(os.sep, "/")] = sha256_file(path)
        elif os.path.isfile(given):
            out[given.replace(os.sep, "/")] = sha256_file(given)
        else:
            raise ManifestError(f"input {given} does not exist")
    return out


def render_manifest(m: Manifest) -> str:
    def check(text, what):
        if "\t" in text or "\n" in text:
            raise ManifestError(f"{what} {text!r} contains tab or newline")
        return text

    lines = [
        "meta\tformat\t1",
        f"meta\tversion\t{m.version}",
        f"meta\tsubcommand\t{check(m.subcommand, 'subcommand')}",
        f"meta\tseed\t{'' if m.seed is None else m.seed}",
    ]
    for key in sorted(m.config):
        lines.append(f"config\t{check(key, 'config key')}\t{check(str(m.config[key]), 'config value')}")
    for path in sorted(m.inputs):
        lines.append(f"input\t{check(path, 'input path')}\t{m.inputs[path]}")
    for rel in sorted(m.outputs):
        lines.append(f"output\t{check(rel, 'output path')}\t{m.outputs[rel]}")
    return "\n".join(lines) + "\n"


def write_manifest(m: Manifest, out_dir) -> str:
    path = os.path.join(os.fspath(out_dir), MANIFEST_NAME)
    atomic_write_text(path, render_manifest(m))
    return path


def load_manifest(path) -> Manifest:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    meta, cfg, inputs, outputs = {}, {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields")
        kind, key, value = parts
        target = {"meta": meta, "config": cfg, "input": inputs, "output": outputs}.get(kind)
        if target is None:
            raise ManifestError(f"{path}:{lineno}: unknown entry kind {kind!r}")
        if key in target:
            raise ManifestError(f"{path}:{lineno}: duplicate {kind} key {key!r}")
        target[key] = value
    if meta.get("format") != "1":
        raise ManifestError(f"{path}: unsupported manifest format {meta.get('format')!r}")
    if "subcommand" not in meta:
        raise ManifestError(f"{path}: missing subcommand")
    seed = meta.get("seed", "")
    return Manifest(
        subcommand=meta["subcommand"],
        seed=None if seed == "" else int(seed),
        config=cfg,
        inputs=inputs,
        outputs=outputs,
        version=meta.get("version", ""),
    )


def verify_inputs(m: Manifest) -> None:
    for path, want in sorted(m.inputs.items()):
        if not os.path.isfile(path):
            raise ManifestError(
                f"input {path} missing at replay; manifest expects sha256 {want}"
            )
        got = sha256_file(path)
        if got != want:
            raise ManifestError(
                f"input hash mismatch for {path}: manifest has {want}, file has {got}"
            )


def verify_outputs(m: Manifest, out_dir) -> None:
    got = hash_tree(out_dir)
    for rel, want in sorted(m.outputs.items()):
        if rel not in got:
            raise ManifestError(f"output {rel} missing under {out_dir}")
        if got[rel] != want:
            raise ManifestError(
                f"output hash mismatch for {rel}: manifest has {want}, file has {got[rel]}"
            )
    extra = sorted(set(got) - set(m.outputs))
    if extra:
        raise ManifestError(f"replay produced unexpected outputs {extra}")


def replay(manifest_path, out_dir) -> Manifest:
    """Re-run the manifest's subcommand and demand bit-identical outputs."""
    from . import cli  # late import: cli depends on this module

    m = load_manifest(manifest_path)
    verify_inputs(m)
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    cfg_path = os.path.join(out_dir, REPLAY_CONFIG)
    atomic_write_text(cfg_path, "".join(f"{k} = {v}\n" for k, v in sorted(m.config.items())))
    argv = [m.subcommand, "--config", cfg_path, "--out", out_dir]
    if m.seed is not None:
        argv += ["--seed", str(m.seed)]
    status = cli.run(argv)
    if status != 0:
        raise ManifestError(f"replay of {m.subcommand} exited with status {status}")
    verify_outputs(m, out_dir)
    return m
