"""Flat key=value config files shared by every subcommand.

Format: one `key = value` per line, `#` comments, blank lines ignored.
Values are strings until a typed getter converts them; unknown or duplicate
keys are errors so typos fail loudly instead of silently using defaults.
"""

import os

from .errors import ConfigError


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=path)


def render_config(cfg: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.items())


def check_keys(cfg: dict, allowed, source: str = "config") -> None:
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}; allowed: {sorted(allowed)}")


_MISSING = object()


def _get(cfg: dict, key: str, default):
    if key in cfg:
        return cfg[key]
    if default is _MISSING:
        raise ConfigError(f"missing required config key {key!r}")
    return default


def get_str(cfg: dict, key: str, default=_MISSING) -> str:
    value = _get(cfg, key, default)
    return value


def get_int(cfg: dict, key: str, default=_MISSING) -> int:
    value = _get(cfg, key, default)
    if isinstance(value, int) or value is None:
        return value
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r} must be an integer, got {value!r}") from exc


def get_float(cfg: dict, key: str, default=_MISSING) -> float:
    value = _get(cfg, key, default)
    if isinstance(value, float) or value is None:
        return value
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r} must be a number, got {value!r}") from exc


def get_bool(cfg: dict, key: str, default=_MISSING) -> bool:
    value = _get(cfg, key, default)
    if isinstance(value, bool) or value is None:
        return value
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"config key {key!r} must be a boolean, got {value!r}")


def get_int_list(cfg: dict, key: str, default=_MISSING) -> tuple:
    value = _get(cfg, key, default)
    if not isinstance(value, str):
        return value
    try:
        return tuple(int(part.strip()) for part in value.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(
            f"config key {key!r} must be comma-separated integers, got {value!r}"
        ) from exc


def get_str_list(cfg: dict, key: str, default=_MISSING) -> tuple:
    value = _get(cfg, key, default)
    if not isinstance(value, str):
        return value
    return tuple(part.strip() for part in value.split(",") if part.strip())
