"""Structured text configs, overrides, seed derivation and run manifests.

Config files are line-oriented ``dotted.key = value`` pairs; nesting comes
from the dots. Values parse as int, float, bool, or a bracketed list, and
fall back to strings. ``#`` starts a comment. The same syntax backs
``--override key=value`` flags and the run manifests written next to every
output, so a manifest can be fed straight back in as a config.
"""

from __future__ import annotations

import hashlib


class ConfigError(ValueError):
    """Invalid configuration input; the CLI maps this to exit code 1."""


def _parse_scalar(text):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def parse_value(text):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        return [_parse_scalar(p) for p in inner.split(",")] if inner else []
    return _parse_scalar(text)


def set_path(tree, dotted_key, value):
    parts = dotted_key.strip().split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"key {dotted_key!r} descends through a scalar")
    node[parts[-1]] = value


def get_path(tree, dotted_key, default=None):
    node = tree
    for part in dotted_key.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def parse_config(text):
    tree = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        if not key.strip():
            raise ConfigError(f"line {lineno}: empty key")
        set_path(tree, key.strip(), parse_value(value))
    return tree


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def apply_overrides(tree, overrides):
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        set_path(tree, key.strip(), parse_value(value))
    return tree


def _flatten(tree, prefix=""):
    items = []
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(_flatten(value, dotted + "."))
        else:
            items.append((dotted, value))
    return items


def dump_config(tree):
    """Deterministic textual form: one sorted dotted key per line."""
    lines = []
    for key, value in sorted(_flatten(tree)):
        if isinstance(value, list):
            value = "[" + ", ".join(str(v) for v in value) + "]"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def derive_seed(master_seed, label):
    """Fan one master seed out into named child seeds.

    Child = low 63 bits of sha256("<master>/<label>"); documented so a run
    manifest plus the master seed reproduces every stream.
    """
    digest = hashlib.sha256(f"{master_seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def write_manifest(path, tree):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(tree))
