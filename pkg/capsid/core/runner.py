"""
Task execution abstraction for CapsID.

This module provides a TaskRunner protocol that abstracts how independent
per-item work (feature extraction, test-set scoring, whole trials) is spread
over workers. Services accept an optional runner so tests can inject a fake
that records calls, and so the worker count never leaks into numeric code:
results always come back in input order.

Example usage in tests:
    class FakeRunner:
        def __init__(self):
            self.calls = []

        def map(self, fn, items):
            items = list(items)
            self.calls.append(len(items))
            return [TaskResult(i, fn(item)) for i, item in enumerate(items)]

    archive = extract_archive(manifest, cfg, runner=FakeRunner())
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
from typing import Any, Callable, Iterable, Protocol, Sequence, TypeVar

T = TypeVar("T")

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskResult:
	"""
	Result of one unit of work.

	Attributes:
		index: Position of the item in the submitted sequence.
		value: Return value of the task (None on failure).
		error: Exception text if the task raised, else None.
		exception: The exception object itself, for callers that re-raise.
	"""
	index: int
	value: Any = None
	error: str | None = None
	exception: BaseException | None = None

	@property
	def ok(self) -> bool:
		return self.error is None


class TaskRunner(Protocol):
	"""
	Protocol for ordered parallel map.

	Implementations must return one TaskResult per item, in input order,
	and must never raise for a failing item.
	"""
	workers: int

	def map(self, fn: Callable[[T], Any], items: Iterable[T]) -> list[TaskResult]: ...


def _call(fn: Callable[[T], Any], index: int, item: T) -> TaskResult:
	try:
		return TaskResult(index, fn(item))
	except Exception as exc:
		logger.debug("task %d failed: %s", index, exc)
		return TaskResult(index, None, f"{type(exc).__name__}: {exc}", exc)


class SerialRunner:
	"""Runs every task on the calling thread."""

	workers = 1

	def map(self, fn: Callable[[T], Any], items: Iterable[T]) -> list[TaskResult]:
		return [_call(fn, i, item) for i, item in enumerate(items)]


class ThreadRunner:
	"""
	Runs tasks on a thread pool.

	numpy releases the GIL inside its kernels, so per-clip DSP and frozen-model
	scoring overlap well. Output order matches input order.
	"""

	def __init__(self, workers: int):
		self.workers = max(1, int(workers))

	def map(self, fn: Callable[[T], Any], items: Iterable[T]) -> list[TaskResult]:
		indexed: Sequence[tuple[int, T]] = list(enumerate(items))
		if self.workers == 1 or len(indexed) <= 1:
			return [_call(fn, i, item) for i, item in indexed]
		with ThreadPoolExecutor(max_workers=self.workers) as pool:
			futures = [pool.submit(_call, fn, i, item) for i, item in indexed]
			return [future.result() for future in futures]


_DEFAULT_RUNNER: SerialRunner | None = None


def get_default_runner() -> SerialRunner:
	"""
	Get the cached default runner instance.

	Service functions use this when no runner is explicitly provided.
	"""
	global _DEFAULT_RUNNER
	if _DEFAULT_RUNNER is None:
		_DEFAULT_RUNNER = SerialRunner()
	return _DEFAULT_RUNNER


def get_runner(workers: int | None) -> TaskRunner:
	"""Serial runner for 1 (or None) workers, a thread pool otherwise."""
	if workers is None or workers <= 1:
		return get_default_runner()
	return ThreadRunner(workers)


def raise_first_failure(results: Sequence[TaskResult]) -> None:
	"""Re-raise the first failed task's exception, if any."""
	for result in results:
		if not result.ok:
			if result.exception is not None:
				raise result.exception
			raise RuntimeError(result.error)
