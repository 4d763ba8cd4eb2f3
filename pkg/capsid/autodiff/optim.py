"""
Adam optimizer.

``adam_step`` is the pure update over plain arrays; ``Adam`` binds it to a
model's named parameter tensors for the training loop.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from capsid.autodiff.tensor import Tensor
from capsid.core.errors import ContractError


@dataclass
class AdamState:
	learning_rate: float = 0.001
	beta1: float = 0.9
	beta2: float = 0.999
	eps: float = 1e-8
	t: int = 0
	m: dict[str, np.ndarray] = field(default_factory=dict)
	v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
	params: Mapping[str, np.ndarray],
	grads: Mapping[str, np.ndarray],
	state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
	"""
	One bias-corrected Adam update.

	Args:
		params: Name -> current values.
		grads: Name -> gradient; names missing here are left unchanged.
		state: Moment buffers, created lazily per parameter.

	Returns:
		(new parameter values, the same state object advanced by one step)
	"""
	state.t += 1
	correction1 = 1.0 - state.beta1 ** state.t
	correction2 = 1.0 - state.beta2 ** state.t
	updated: dict[str, np.ndarray] = {}
	for name, value in params.items():
		grad = grads.get(name)
		if grad is None:
			updated[name] = value
			continue
		if grad.shape != value.shape:
			raise ContractError(f"gradient for {name} has shape {grad.shape}, parameter has {value.shape}")
		m = state.m.get(name)
		v = state.v.get(name)
		if m is None:
			m = np.zeros_like(value)
			v = np.zeros_like(value)
		m = state.beta1 * m + (1.0 - state.beta1) * grad
		v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
		state.m[name], state.v[name] = m, v
		m_hat = m / correction1
		v_hat = v / correction2
		updated[name] = value - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
	return updated, state


class Adam:
	"""Adam over a fixed, ordered set of named parameter tensors."""

	def __init__(self, params: Mapping[str, Tensor], learning_rate: float = 0.001, **kwargs):
		if not learning_rate > 0:
			raise ContractError(f"learning rate must be positive, got {learning_rate}")
		self.params = dict(params)
		self.state = AdamState(learning_rate=learning_rate, **kwargs)

	def zero_grad(self) -> None:
		for tensor in self.params.values():
			tensor.zero_grad()

	def step(self) -> None:
		values = {name: t.data for name, t in self.params.items()}
		grads = {name: t.grad for name, t in self.params.items() if t.grad is not None}
		updated, self.state = adam_step(values, grads, self.state)
		for name, tensor in self.params.items():
			tensor.data = updated[name]
