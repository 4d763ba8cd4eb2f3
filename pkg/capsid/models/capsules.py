"""
Capsule primitives: squash, prediction vectors and routing by agreement.

Shapes (batched; a leading batch axis B is optional everywhere):
    u      [B x N_lower x d_lower]            lower capsule outputs
    W      [N_lower x N_upper x d_upper x d_lower]
    u_hat  [B x N_lower x N_upper x d_upper]  prediction vectors
    b, c   [B x N_lower x N_upper]            routing logits and couplings
    s, v   [B x N_upper x d_upper]            totals and squashed outputs
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capsid.autodiff import ops
from capsid.autodiff.tensor import Tensor, as_tensor
from capsid.core.errors import ContractError, ShapeError


@dataclass
class CapsuleLayerParams:
	W: Tensor
	routing_iterations: int = 3

	def __post_init__(self):
		if self.W.ndim != 4:
			raise ShapeError(f"capsule transform must be 4-D, got {self.W.shape}")
		if self.routing_iterations < 1:
			raise ContractError(f"routing needs at least 1 iteration, got {self.routing_iterations}")

	@property
	def n_lower(self) -> int:
		return self.W.shape[0]

	@property
	def n_upper(self) -> int:
		return self.W.shape[1]


@dataclass(frozen=True)
class RoutingStep:
	"""Values seen in one routing iteration; ``b`` is the logit used for ``c``."""

	b: np.ndarray
	c: np.ndarray
	s: np.ndarray
	v: np.ndarray


@dataclass(frozen=True)
class RoutingState:
	u_hat: np.ndarray
	b: np.ndarray
	c: np.ndarray
	s: np.ndarray
	v: np.ndarray
	trajectory: tuple[RoutingStep, ...]


def squash(s, axis: int = -1) -> Tensor:
	"""
	v = s * |s| / (1 + |s|^2), which equals (|s|^2 / (1 + |s|^2)) * s / |s|
	without the division at the origin, so squash(0) = 0 exactly.
	"""
	s = as_tensor(s)
	length = ops.norm(s, axis=axis, keepdims=True)
	return ops.mul(s, ops.div(length, ops.add(1.0, ops.mul(length, length))))


def predict_vectors(u, W) -> Tensor:
	"""u_hat[i, j] = W[i, j] @ u[i] for every lower/upper pair."""
	u, W = as_tensor(u), as_tensor(W)
	if W.ndim != 4:
		raise ShapeError(f"capsule transform must be 4-D, got {W.shape}")
	single = u.ndim == 2
	if single:
		u = ops.reshape(u, (1,) + u.shape)
	if u.ndim != 3 or u.shape[1] != W.shape[0] or u.shape[2] != W.shape[3]:
		raise ShapeError(f"lower capsules {u.shape} do not match transform {W.shape}")
	u_hat = ops.einsum("ijkl,bil->bijk", W, u)
	return ops.reshape(u_hat, u_hat.shape[1:]) if single else u_hat


def route(u_hat, iterations: int) -> tuple[Tensor, RoutingState]:
	"""
	Routing by agreement.

	b starts at 0 on every call. Each iteration computes c = softmax(b) over
	the upper axis, s_j = sum_i c_ij u_hat_j|i and v_j = squash(s_j); every
	iteration except the last then adds the agreement u_hat_j|i . v_j to b.
	Gradients flow through all iterations.
	"""
	if iterations < 1:
		raise ContractError(f"routing needs at least 1 iteration, got {iterations}")
	u_hat = as_tensor(u_hat)
	single = u_hat.ndim == 3
	if single:
		u_hat = ops.reshape(u_hat, (1,) + u_hat.shape)
	if u_hat.ndim != 4:
		raise ShapeError(f"prediction vectors must be [B x N_lower x N_upper x d], got {u_hat.shape}")
	batch, n_lower, n_upper, _ = u_hat.shape
	b = Tensor(np.zeros((batch, n_lower, n_upper)))
	steps: list[RoutingStep] = []
	for iteration in range(iterations):
		c = ops.softmax(b, axis=2)
		s = ops.einsum("bij,bijk->bjk", c, u_hat)
		v = squash(s)
		steps.append(RoutingStep(b.data.copy(), c.data.copy(), s.data.copy(), v.data.copy()))
		if iteration < iterations - 1:
			b = ops.add(b, ops.einsum("bijk,bjk->bij", u_hat, v))

	def unbatch(values: np.ndarray) -> np.ndarray:
		return values[0] if single else values

	trajectory = tuple(RoutingStep(unbatch(st.b), unbatch(st.c), unbatch(st.s), unbatch(st.v)) for st in steps)
	last = trajectory[-1]
	state = RoutingState(unbatch(u_hat.data), last.b, last.c, last.s, last.v, trajectory)
	return (ops.reshape(v, v.shape[1:]) if single else v), state


def capsule_layer(u, params: CapsuleLayerParams) -> tuple[Tensor, RoutingState]:
	return route(predict_vectors(u, params.W), params.routing_iterations)


def capsule_lengths(v) -> Tensor:
	return ops.norm(v, axis=-1)


def mask_digitcaps(v, labels=None) -> Tensor:
	"""
	Zero every class capsule except the selected one and flatten.

	Args:
		v: [B x n_classes x d] (or a single [n_classes x d]).
		labels: Class index per item; None selects argmax |v_c| (lowest index on ties).

	Returns:
		[B x n_classes*d] (or [n_classes*d] for a single input).
	"""
	v = as_tensor(v)
	single = v.ndim == 2
	if single:
		v = ops.reshape(v, (1,) + v.shape)
	batch, n_classes, dim = v.shape
	if labels is None:
		selected = np.argmax(np.linalg.norm(v.data, axis=-1), axis=1)
	else:
		selected = np.atleast_1d(np.asarray(labels, dtype=np.int64))
		if selected.shape != (batch,):
			raise ContractError(f"{selected.size} labels for a batch of {batch}")
		if np.any(selected < 0) or np.any(selected >= n_classes):
			raise ContractError(f"label outside [0, {n_classes})")
	mask = np.zeros((batch, n_classes, 1))
	mask[np.arange(batch), selected, 0] = 1.0
	flat = ops.reshape(ops.mul(v, mask), (batch, n_classes * dim))
	return ops.reshape(flat, (n_classes * dim,)) if single else flat
