"""Logging setup driven by the CAPSID_LOG environment variable."""
from __future__ import annotations

import logging
import os
import sys

ENV_VAR = "CAPSID_LOG"
LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

_HANDLER: logging.Handler | None = None


def resolve_level(value: str | None) -> int | None:
	"""Map a CAPSID_LOG value to a logging level; None if unrecognised."""
	if value is None or not value.strip():
		return logging.INFO
	return LEVELS.get(value.strip().lower())


def configure_logging(level: str | None = None) -> int:
	"""
	Install a single stderr handler on the ``capsid`` logger.

	Args:
		level: Explicit level name; falls back to $CAPSID_LOG, then "info".

	Returns:
		The numeric level that was applied.
	"""
	global _HANDLER
	raw = level if level is not None else os.environ.get(ENV_VAR)
	resolved = resolve_level(raw)
	root = logging.getLogger("capsid")
	if _HANDLER is None:
		_HANDLER = logging.StreamHandler(sys.stderr)
		_HANDLER.setFormatter(logging.Formatter("[%(asctime)s] %(levelname)s %(name)s: %(message)s", datefmt="%H:%M:%S"))
		root.addHandler(_HANDLER)
	root.setLevel(resolved if resolved is not None else logging.INFO)
	if resolved is None:
		root.warning("unknown %s value %r, using info", ENV_VAR, raw)
		return logging.INFO
	return resolved
