"""
Margin loss on capsule lengths and the total loss with the reconstruction term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capsid.autodiff import ops
from capsid.autodiff.tensor import Tensor, as_tensor
from capsid.core.errors import ContractError


@dataclass(frozen=True)
class LossConfig:
	m_plus: float = 0.9
	m_minus: float = 0.1
	lambda_: float = 0.5
	alpha: float = 0.0005

	def validate(self) -> list[str]:
		problems = []
		if not 0.0 < self.m_minus < self.m_plus < 1.0:
			problems.append(f"loss.m_minus/m_plus: need 0 < m_minus < m_plus < 1, got {self.m_minus}/{self.m_plus}")
		if self.lambda_ < 0:
			problems.append(f"loss.lambda_: must be non-negative, got {self.lambda_}")
		if not self.alpha > 0:
			problems.append(f"loss.alpha: must be positive, got {self.alpha}")
		return problems


def one_hot(labels, n_classes: int) -> np.ndarray:
	labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
	if np.any(labels < 0) or np.any(labels >= n_classes):
		raise ContractError(f"label outside [0, {n_classes})")
	out = np.zeros((labels.size, n_classes))
	out[np.arange(labels.size), labels] = 1.0
	return out


def margin_loss(lengths, targets, cfg: LossConfig = LossConfig()) -> Tensor:
	"""
	sum_c T_c max(0, m+ - |v_c|)^2 + lambda (1 - T_c) max(0, |v_c| - m-)^2

	Args:
		lengths: Capsule lengths, [n_classes] or [B x n_classes].
		targets: Class index (or one per batch row).

	Returns:
		Scalar; averaged over the batch when ``lengths`` is 2-D.
	"""
	lengths = as_tensor(lengths)
	single = lengths.ndim == 1
	if single:
		lengths = ops.reshape(lengths, (1, lengths.shape[0]))
	present = one_hot(targets, lengths.shape[1])
	if present.shape[0] != lengths.shape[0]:
		raise ContractError(f"{present.shape[0]} targets for {lengths.shape[0]} rows")
	hit = ops.power(ops.relu(ops.sub(cfg.m_plus, lengths)), 2)
	miss = ops.power(ops.relu(ops.sub(lengths, cfg.m_minus)), 2)
	per_class = ops.add(ops.mul(present, hit), ops.mul(cfg.lambda_ * (1.0 - present), miss))
	per_item = ops.sum(per_class, axis=1)
	return ops.sum(per_item) if single else ops.mean(per_item)


def reconstruction_loss(reconstruction, target) -> Tensor:
	"""Mean squared error between the decoder output and its target, flattened per item."""
	reconstruction = as_tensor(reconstruction)
	target = np.asarray(as_tensor(target).data).reshape(reconstruction.shape)
	return ops.mse(reconstruction, target)


def total_loss(margin, reconstruction_mse=None, cfg: LossConfig = LossConfig()) -> Tensor:
	"""margin + alpha * reconstruction; the margin alone when there is no decoder."""
	margin = as_tensor(margin)
	if reconstruction_mse is None:
		return margin
	return ops.add(margin, ops.mul(cfg.alpha, as_tensor(reconstruction_mse)))
