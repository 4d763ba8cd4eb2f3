"""
Exception hierarchy for CapsID.

Every error carries a stable ``code`` so the CLI can print a single
machine-parsable failure line (``error: <code>: <message>``).
"""
from __future__ import annotations

from typing import Sequence


class CapsidError(Exception):
	code = "capsid"


class WavParseError(CapsidError):
	code = "wav-parse"

	def __init__(self, chunk: str, message: str):
		super().__init__(f"{chunk}: {message}")
		self.chunk = chunk


class UnsupportedFormatError(CapsidError):
	code = "unsupported-format"


class ManifestError(CapsidError):
	code = "manifest"


class ConfigError(CapsidError):
	code = "config"

	def __init__(self, violations: Sequence[str] | str):
		if isinstance(violations, str):
			violations = [violations]
		self.violations = list(violations)
		super().__init__("; ".join(self.violations))


class TooShortError(CapsidError):
	code = "too-short"


class DegenerateSignalError(CapsidError):
	code = "degenerate-signal"


class ShapeError(CapsidError):
	code = "shape"


class NumericFaultError(CapsidError):
	code = "numeric-fault"


class ContractError(CapsidError):
	code = "contract"


class ProtocolViolationError(CapsidError):
	code = "protocol-violation"


class DivergenceError(CapsidError):
	code = "divergence"

	def __init__(self, message: str, *, epoch: int | None = None, batch: int | None = None):
		where = []
		if epoch is not None:
			where.append(f"epoch={epoch}")
		if batch is not None:
			where.append(f"batch={batch}")
		suffix = f" ({', '.join(where)})" if where else ""
		super().__init__(f"{message}{suffix}")
		self.epoch = epoch
		self.batch = batch


class UndefinedMetricError(CapsidError):
	code = "undefined-metric"


class DegenerateTestError(CapsidError):
	code = "degenerate-test"


class TrialError(CapsidError):
	"""Wraps a failure raised inside one trial or one ablation cell."""

	code = "trial"

	def __init__(self, where: str, cause: BaseException):
		super().__init__(f"{where}: {cause}")
		self.where = where
		self.cause = cause
