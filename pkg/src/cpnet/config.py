"""Plain-text ``key=value`` configuration files."""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_keyvalue(text: str, source: str = "<config>") -> dict[str, str]:
    """One ``key=value`` per line; ``#`` starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_keyvalue(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_keyvalue(text, str(path))


def format_keyvalue(items: dict[str, object]) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in items.items())


def _fmt(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def to_bool(key: str, value: str) -> bool:
    low = value.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean (true/false), got {value!r}")


def to_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def to_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def to_int_list(key: str, value: str) -> tuple[int, ...]:
    return tuple(to_int(key, v.strip()) for v in value.split(",") if v.strip())


MODEL_KEYS = {
    "lookback": to_int,
    "horizon": to_int,
    "branches": None,
    "embed_channels": to_int,
    "hidden": to_int,
    "dilated_kernel": to_int,
    "ablate_tp": to_bool,
    "ablate_cs": to_bool,
    "dropout": to_float,
}


def coerce_model_fields(raw: dict[str, str]) -> dict[str, object]:
    from .model import parse_branches

    out: dict[str, object] = {}
    for key, value in raw.items():
        if key not in MODEL_KEYS:
            raise ConfigError(f"unknown model key {key!r}")
        if key == "branches":
            try:
                out[key] = parse_branches(value)
            except ValueError as exc:
                raise ConfigError(f"branches: {exc}") from None
        else:
            out[key] = MODEL_KEYS[key](key, value)
    return out
