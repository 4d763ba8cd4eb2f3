"""
Dense float64 tensors with reverse-mode differentiation.

Every operation that produces a Tensor from inputs that require gradients
records a node: the op tag, its inputs and an adjoint closure mapping the
output gradient to one gradient per input. Nodes carry a creation sequence
number, so backward can walk the graph in exact reverse construction order
without a topological sort.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
import itertools
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from capsid.core.errors import ContractError, NumericFaultError

_sequence = itertools.count()
_local = threading.local()

# output gradient -> one gradient (or None) per input
Adjoint = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def is_grad_enabled() -> bool:
	return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
	"""Evaluate without recording graph nodes (thread-local)."""
	previous = is_grad_enabled()
	_local.grad_enabled = False
	try:
		yield
	finally:
		_local.grad_enabled = previous


class Tensor:
	__slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "seq")

	def __init__(self, data, requires_grad: bool = False):
		self.data = np.array(data, dtype=np.float64)
		self.requires_grad = bool(requires_grad)
		self.grad: np.ndarray | None = None
		self.op = "leaf"
		self.parents: tuple[Tensor, ...] = ()
		self._backward: Adjoint | None = None
		self.seq = next(_sequence)

	def __repr__(self) -> str:
		flag = ", requires_grad=True" if self.requires_grad else ""
		return f"Tensor(shape={self.shape}, op={self.op}{flag})"

	@property
	def shape(self) -> tuple[int, ...]:
		return self.data.shape

	@property
	def ndim(self) -> int:
		return self.data.ndim

	@property
	def size(self) -> int:
		return self.data.size

	def numpy(self) -> np.ndarray:
		return self.data

	def item(self) -> float:
		if self.data.size != 1:
			raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
		return float(self.data.reshape(-1)[0])

	def zero_grad(self) -> None:
		self.grad = None

	def detach(self) -> Tensor:
		return Tensor(self.data)

	def accumulate(self, grad: np.ndarray) -> None:
		if self.grad is None:
			self.grad = np.array(grad, dtype=np.float64)
		else:
			self.grad = self.grad + grad

	def backward(self) -> None:
		backward(self)

	# operator sugar; implementations live in capsid.autodiff.ops
	def __add__(self, other):
		from capsid.autodiff import ops
		return ops.add(self, other)

	def __radd__(self, other):
		from capsid.autodiff import ops
		return ops.add(other, self)

	def __sub__(self, other):
		from capsid.autodiff import ops
		return ops.sub(self, other)

	def __rsub__(self, other):
		from capsid.autodiff import ops
		return ops.sub(other, self)

	def __mul__(self, other):
		from capsid.autodiff import ops
		return ops.mul(self, other)

	def __rmul__(self, other):
		from capsid.autodiff import ops
		return ops.mul(other, self)

	def __truediv__(self, other):
		from capsid.autodiff import ops
		return ops.div(self, other)

	def __rtruediv__(self, other):
		from capsid.autodiff import ops
		return ops.div(other, self)

	def __neg__(self):
		from capsid.autodiff import ops
		return ops.neg(self)

	def __pow__(self, exponent: float):
		from capsid.autodiff import ops
		return ops.power(self, exponent)

	def __matmul__(self, other):
		from capsid.autodiff import ops
		return ops.matmul(self, other)


def as_tensor(value) -> Tensor:
	return value if isinstance(value, Tensor) else Tensor(value)


def make_result(
	op: str,
	data: np.ndarray,
	parents: Sequence[Tensor],
	backward_fn: Adjoint,
) -> Tensor:
	"""
	Wrap an op's output, checking it is finite and recording the node when
	any input needs a gradient and recording is enabled.
	"""
	if not np.all(np.isfinite(data)):
		raise NumericFaultError(f"{op} produced non-finite values")
	out = Tensor(data)
	out.op = op
	if is_grad_enabled() and any(p.requires_grad for p in parents):
		out.requires_grad = True
		out.parents = tuple(parents)
		out._backward = backward_fn
	return out


@dataclass(frozen=True)
class GraphNode:
	seq: int
	op: str
	inputs: tuple[int, ...]
	output: Tensor


@dataclass(frozen=True)
class Graph:
	"""Nodes reachable from one output, in construction order."""

	nodes: tuple[GraphNode, ...]

	def __len__(self) -> int:
		return len(self.nodes)

	def ops(self) -> list[str]:
		return [node.op for node in self.nodes]


def _reachable(root: Tensor) -> list[Tensor]:
	seen: dict[int, Tensor] = {}
	stack = [root]
	while stack:
		node = stack.pop()
		if node.seq in seen:
			continue
		seen[node.seq] = node
		stack.extend(p for p in node.parents if p.requires_grad)
	return sorted(seen.values(), key=lambda t: t.seq)


def trace(root: Tensor) -> Graph:
	return Graph(
		tuple(GraphNode(t.seq, t.op, tuple(p.seq for p in t.parents), t) for t in _reachable(root))
	)


def backward(loss: Tensor) -> None:
	"""
	Populate ``grad`` on every tensor that ``loss`` depends on.

	Gradients accumulate into existing ``grad`` buffers; call ``zero_grad``
	on parameters between steps.
	"""
	if loss.data.size != 1 or loss.ndim > 1:
		raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
	if not loss.requires_grad:
		raise ContractError("loss does not depend on any tensor that requires a gradient")
	nodes = _reachable(loss)
	# interior gradients live only for this pass; leaves keep theirs
	interior: dict[int, np.ndarray] = {loss.seq: np.ones_like(loss.data)}
	for node in reversed(nodes):
		grad = interior.pop(node.seq, None)
		if grad is None:
			continue
		if node._backward is None:
			node.accumulate(grad)
			continue
		for parent, parent_grad in _split_grads(node, grad):
			if parent._backward is None:
				parent.accumulate(parent_grad)
			elif parent.seq in interior:
				interior[parent.seq] = interior[parent.seq] + parent_grad
			else:
				interior[parent.seq] = parent_grad


def _split_grads(node: Tensor, grad: np.ndarray) -> list[tuple[Tensor, np.ndarray]]:
	"""Run the node's adjoint and pair each input with its gradient."""
	grads = node._backward(grad)
	pairs = []
	for parent, parent_grad in zip(node.parents, grads):
		if parent_grad is None or not parent.requires_grad:
			continue
		if parent_grad.shape != parent.shape:
			raise ContractError(f"{node.op} adjoint returned shape {parent_grad.shape} for input {parent.shape}")
		if not np.all(np.isfinite(parent_grad)):
			raise NumericFaultError(f"{node.op} gradient has non-finite values")
		pairs.append((parent, parent_grad))
	return pairs
