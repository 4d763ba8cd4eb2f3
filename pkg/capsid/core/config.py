"""
Flat ``section.key = value`` configuration files.

The format is deliberately trivial so any language can read it:

    # comment
    train.batch_size = 64
    model.architecture = capsnet_m
    features.target_frames = 300

Parsing is pure; coercion onto frozen dataclasses goes through the field
type hints, and every problem is collected so a single ConfigError can list
all violations at once.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, Mapping

from capsid.core.errors import ConfigError


def parse_config_text(text: str) -> dict[str, dict[str, str]]:
	"""
	Parse config text into ``{section: {key: raw_value}}``.

	This is a pure function for easy testing - no side effects.
	"""
	sections: dict[str, dict[str, str]] = {}
	problems: list[str] = []
	for lineno, raw in enumerate(text.splitlines(), start=1):
		line = raw.split("#", 1)[0].strip()
		if not line:
			continue
		if "=" not in line:
			problems.append(f"line {lineno}: expected 'section.key = value'")
			continue
		name, value = (part.strip() for part in line.split("=", 1))
		if "." not in name:
			problems.append(f"line {lineno}: key {name!r} has no section prefix")
			continue
		section, key = name.split(".", 1)
		sections.setdefault(section, {})[key] = value
	if problems:
		raise ConfigError(problems)
	return sections


def load_config_file(path: str | Path) -> dict[str, dict[str, str]]:
	try:
		text = Path(path).read_text(encoding="utf-8")
	except OSError as exc:
		raise ConfigError(f"cannot read config {path}: {exc}") from exc
	return parse_config_text(text)


def _unwrap_optional(hint: Any) -> tuple[Any, bool]:
	origin = typing.get_origin(hint)
	if origin in (typing.Union, types.UnionType):
		args = [arg for arg in typing.get_args(hint) if arg is not type(None)]
		if len(args) == 1:
			return args[0], True
	return hint, False


def coerce_value(raw: Any, hint: Any) -> Any:
	"""Convert a raw (usually string) value to the annotated type."""
	hint, optional = _unwrap_optional(hint)
	if optional and isinstance(raw, str) and raw.strip().lower() in ("", "none", "null"):
		return None
	if not isinstance(raw, str):
		if hint is float and isinstance(raw, int) and not isinstance(raw, bool):
			return float(raw)
		if typing.get_origin(hint) is tuple and isinstance(raw, list):
			return tuple(raw)
		return raw
	text = raw.strip()
	if hint is bool:
		lowered = text.lower()
		if lowered in ("1", "true", "yes", "on"):
			return True
		if lowered in ("0", "false", "no", "off"):
			return False
		raise ValueError(f"not a boolean: {raw!r}")
	if hint is int:
		return int(text)
	if hint is float:
		return float(text)
	if hint is str:
		return text
	if typing.get_origin(hint) is tuple:
		args = typing.get_args(hint)
		item_type = args[0] if args else str
		parts = [part.strip() for part in text.split(",") if part.strip()]
		return tuple(coerce_value(part, item_type) for part in parts)
	return text


def apply_overrides(instance: Any, values: Mapping[str, Any], *, section: str = "") -> tuple[Any, list[str]]:
	"""
	Return a copy of a dataclass instance with ``values`` applied.

	Returns:
		(new_instance, violations); unknown keys and bad values are reported
		as violations and left at their previous value.
	"""
	hints = typing.get_type_hints(type(instance))
	names = {field.name for field in dataclasses.fields(instance)}
	changes: dict[str, Any] = {}
	violations: list[str] = []
	prefix = f"{section}." if section else ""
	for key, raw in values.items():
		if key not in names:
			violations.append(f"{prefix}{key}: unknown key")
			continue
		try:
			changes[key] = coerce_value(raw, hints[key])
		except (TypeError, ValueError) as exc:
			violations.append(f"{prefix}{key}: {exc}")
	return dataclasses.replace(instance, **changes), violations


def to_flat_dict(instance: Any) -> dict[str, Any]:
	"""JSON-friendly dict of a dataclass (tuples become lists)."""
	out: dict[str, Any] = {}
	for field in dataclasses.fields(instance):
		value = getattr(instance, field.name)
		if isinstance(value, tuple):
			value = [list(v) if isinstance(v, tuple) else v for v in value]
		elif dataclasses.is_dataclass(value):
			value = to_flat_dict(value)
		out[field.name] = value
	return out
