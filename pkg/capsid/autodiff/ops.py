"""
Differentiable operations.

Each op computes its forward value with numpy and hands ``make_result`` an
adjoint that maps the output gradient to one gradient per input. Composite
ops (dense, batchnorm2d, dropout, global_avg_pool) are built from the
primitives so their adjoints come for free.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import expit

from capsid.autodiff.tensor import Tensor, as_tensor, make_result
from capsid.core.errors import ContractError, ShapeError

PROB_FLOOR = 1e-12

Axis = int | tuple[int, ...] | None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
	"""Sum a broadcast gradient back down to ``shape``."""
	while grad.ndim > len(shape):
		grad = grad.sum(axis=0)
	for axis, size in enumerate(shape):
		if size == 1 and grad.shape[axis] != 1:
			grad = grad.sum(axis=axis, keepdims=True)
	return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
	try:
		np.broadcast_shapes(a.shape, b.shape)
	except ValueError as exc:
		raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def _norm_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
	if axis is None:
		return tuple(range(ndim))
	axes = (axis,) if isinstance(axis, int) else tuple(axis)
	return tuple(sorted(a % ndim for a in axes))


def _expand(grad: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
	if keepdims:
		return grad
	for a in axes:
		grad = np.expand_dims(grad, a)
	return grad


def add(a, b) -> Tensor:
	a, b = as_tensor(a), as_tensor(b)
	_broadcast_shape("add", a, b)
	return make_result(
		"add",
		a.data + b.data,
		(a, b),
		lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
	)


def sub(a, b) -> Tensor:
	a, b = as_tensor(a), as_tensor(b)
	_broadcast_shape("sub", a, b)
	return make_result(
		"sub",
		a.data - b.data,
		(a, b),
		lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
	)


def mul(a, b) -> Tensor:
	a, b = as_tensor(a), as_tensor(b)
	_broadcast_shape("mul", a, b)
	return make_result(
		"mul",
		a.data * b.data,
		(a, b),
		lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
	)


def div(a, b) -> Tensor:
	a, b = as_tensor(a), as_tensor(b)
	_broadcast_shape("div", a, b)
	with np.errstate(divide="ignore", invalid="ignore"):
		data = a.data / b.data
	return make_result(
		"div",
		data,
		(a, b),
		lambda g: (
			_unbroadcast(g / b.data, a.shape),
			_unbroadcast(-g * a.data / (b.data * b.data), b.shape),
		),
	)


def neg(x) -> Tensor:
	x = as_tensor(x)
	return make_result("neg", -x.data, (x,), lambda g: (-g,))


def power(x, exponent: float) -> Tensor:
	x = as_tensor(x)
	with np.errstate(divide="ignore", invalid="ignore"):
		data = x.data ** exponent
	return make_result(
		"power",
		data,
		(x,),
		lambda g: (g * exponent * x.data ** (exponent - 1),),
	)


def exp(x) -> Tensor:
	x = as_tensor(x)
	with np.errstate(over="ignore"):
		data = np.exp(x.data)
	return make_result("exp", data, (x,), lambda g: (g * data,))


def log(x) -> Tensor:
	x = as_tensor(x)
	with np.errstate(divide="ignore", invalid="ignore"):
		data = np.log(x.data)
	return make_result("log", data, (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
	x = as_tensor(x)
	with np.errstate(invalid="ignore"):
		data = np.sqrt(x.data)
	return make_result("sqrt", data, (x,), lambda g: (g / (2.0 * data),))


def relu(x) -> Tensor:
	x = as_tensor(x)
	return make_result("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x) -> Tensor:
	x = as_tensor(x)
	data = expit(x.data)
	return make_result("sigmoid", data, (x,), lambda g: (g * data * (1.0 - data),))


def sum(x, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
	x = as_tensor(x)
	axes = _norm_axes(axis, x.ndim)
	return make_result(
		"sum",
		x.data.sum(axis=axes, keepdims=keepdims),
		(x,),
		lambda g: (np.broadcast_to(_expand(g, axes, keepdims), x.shape).copy(),),
	)


def mean(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
	x = as_tensor(x)
	axes = _norm_axes(axis, x.ndim)
	count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
	return make_result(
		"mean",
		x.data.mean(axis=axes, keepdims=keepdims),
		(x,),
		lambda g: (np.broadcast_to(_expand(g, axes, keepdims) / count, x.shape).copy(),),
	)


def norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
	"""Euclidean length along one axis; the gradient at a zero vector is 0."""
	x = as_tensor(x)
	axes = _norm_axes(axis, x.ndim)
	lengths = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))

	def adjoint(g):
		g = _expand(g, axes, keepdims)
		safe = np.where(lengths > 0, lengths, 1.0)
		return (np.where(lengths > 0, g * x.data / safe, 0.0),)

	data = lengths if keepdims else np.squeeze(lengths, axis=axes)
	return make_result("norm", data, (x,), adjoint)


def softmax(x, axis: int = -1) -> Tensor:
	x = as_tensor(x)
	shifted = x.data - x.data.max(axis=axis, keepdims=True)
	e = np.exp(shifted)
	data = e / e.sum(axis=axis, keepdims=True)
	return make_result(
		"softmax",
		data,
		(x,),
		lambda g: (data * (g - (g * data).sum(axis=axis, keepdims=True)),),
	)


def reshape(x, shape: Sequence[int]) -> Tensor:
	x = as_tensor(x)
	try:
		data = x.data.reshape(tuple(shape))
	except ValueError as exc:
		raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
	return make_result("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
	x = as_tensor(x)
	axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
	if sorted(axes) != list(range(x.ndim)):
		raise ShapeError(f"axes {axes} are not a permutation of {x.ndim} dimensions")
	inverse = tuple(np.argsort(axes))
	return make_result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def take(x, indices, axis: int = 0) -> Tensor:
	"""Gather along one axis; repeated indices accumulate their gradients."""
	x = as_tensor(x)
	idx = np.asarray(indices, dtype=np.int64)
	axis = axis % x.ndim
	if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
		raise ShapeError(f"index out of range for axis {axis} of size {x.shape[axis]}")

	def adjoint(g):
		out = np.zeros(x.shape)
		moved_out = np.moveaxis(out, axis, 0)
		moved_g = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
		np.add.at(moved_out, idx, moved_g)
		return (out,)

	return make_result("take", np.take(x.data, idx, axis=axis), (x,), adjoint)


def matmul(a, b) -> Tensor:
	a, b = as_tensor(a), as_tensor(b)
	if a.ndim < 2 or b.ndim < 2:
		raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
	if a.shape[-1] != b.shape[-2]:
		raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
	return make_result(
		"matmul",
		np.matmul(a.data, b.data),
		(a, b),
		lambda g: (
			_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
			_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape),
		),
	)


def einsum(subscripts: str, a, b) -> Tensor:
	"""
	Two-operand einsum with an explicit output, e.g. ``"ijkl,bil->bijk"``.

	Each operand's adjoint is itself an einsum of the output gradient with
	the other operand; indices summed away inside a single operand are
	broadcast back.
	"""
	a, b = as_tensor(a), as_tensor(b)
	if "->" not in subscripts or "..." in subscripts:
		raise ShapeError(f"einsum needs explicit indices and an output, got {subscripts!r}")
	inputs, out_sub = subscripts.replace(" ", "").split("->")
	try:
		a_sub, b_sub = inputs.split(",")
	except ValueError as exc:
		raise ShapeError(f"einsum takes exactly two operands, got {inputs!r}") from exc
	for name, sub_, t in (("first", a_sub, a), ("second", b_sub, b)):
		if len(set(sub_)) != len(sub_):
			raise ShapeError(f"einsum: repeated index in {name} operand {sub_!r}")
		if len(sub_) != t.ndim:
			raise ShapeError(f"einsum: {name} operand {sub_!r} does not match shape {t.shape}")
	try:
		data = np.einsum(subscripts, a.data, b.data, optimize=True)
	except ValueError as exc:
		raise ShapeError(f"einsum {subscripts!r}: {exc}") from exc

	def operand_grad(g, own_sub, own, other_sub, other):
		kept = "".join(c for c in own_sub if c in out_sub or c in other_sub)
		grad = np.einsum(f"{out_sub},{other_sub}->{kept}", g, other.data, optimize=True)
		# indices only in this operand were summed; broadcast them back
		for axis, c in enumerate(own_sub):
			if c not in kept:
				grad = np.expand_dims(grad, axis)
		return np.broadcast_to(grad, own.shape).copy()

	return make_result(
		"einsum",
		data,
		(a, b),
		lambda g: (
			operand_grad(g, a_sub, a, b_sub, b) if a.requires_grad else None,
			operand_grad(g, b_sub, b, a_sub, a) if b.requires_grad else None,
		),
	)


def dense(x, weight, bias=None) -> Tensor:
	"""x [N x in] @ weight [in x out] + bias [out]."""
	x, weight = as_tensor(x), as_tensor(weight)
	if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
		raise ShapeError(f"dense: input {x.shape} does not match weight {weight.shape}")
	out = matmul(x, weight)
	return out if bias is None else add(out, bias)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
	return (size - kernel) // stride + 1


def conv2d(x, kernels, bias=None, stride: tuple[int, int] = (1, 1)) -> Tensor:
	"""
	Valid cross-correlation, no padding.

	Args:
		x: [N x C_in x H x W] or a single [C_in x H x W] input.
		kernels: [C_out x C_in x kh x kw].
		bias: Optional [C_out].
		stride: (rows, columns).

	Returns:
		[N x C_out x H' x W'] (or [C_out x H' x W'] for a single input) with
		H' = floor((H - kh) / sh) + 1 and W' likewise.
	"""
	x, kernels = as_tensor(x), as_tensor(kernels)
	single = x.ndim == 3
	xd = x.data[None] if single else x.data
	if xd.ndim != 4 or kernels.ndim != 4:
		raise ShapeError(f"conv2d needs a 4-D input and kernel, got {x.shape} and {kernels.shape}")
	n, c, h, w = xd.shape
	o, kc, kh, kw = kernels.shape
	sh, sw = stride
	if kc != c:
		raise ShapeError(f"conv2d: kernel expects {kc} input channels, input has {c}")
	if kh > h or kw > w:
		raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
	if sh < 1 or sw < 1:
		raise ShapeError(f"conv2d: stride must be positive, got {stride}")
	ho, wo = conv_output_size(h, kh, sh), conv_output_size(w, kw, sw)

	def window(i: int, j: int) -> tuple[slice, ...]:
		return (slice(None), slice(None), slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))

	# one contraction per kernel offset keeps memory at the size of the output
	acc = np.zeros((o, n, ho, wo))
	for i in range(kh):
		for j in range(kw):
			acc += np.tensordot(kernels.data[:, :, i, j], xd[window(i, j)], axes=([1], [1]))
	out = acc.transpose(1, 0, 2, 3)
	parents: tuple[Tensor, ...] = (x, kernels)
	if bias is not None:
		bias = as_tensor(bias)
		if bias.shape != (o,):
			raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
		out = out + bias.data[None, :, None, None]
		parents = (x, kernels, bias)

	def adjoint(g):
		g4 = g[None] if single else g
		gt = g4.transpose(1, 0, 2, 3)
		gx = np.zeros_like(xd) if x.requires_grad else None
		gk = np.zeros_like(kernels.data) if kernels.requires_grad else None
		for i in range(kh):
			for j in range(kw):
				win = window(i, j)
				if gk is not None:
					gk[:, :, i, j] = np.tensordot(gt, xd[win], axes=([1, 2, 3], [0, 2, 3]))
				if gx is not None:
					gx[win] += np.tensordot(kernels.data[:, :, i, j], gt, axes=([0], [0])).transpose(1, 0, 2, 3)
		grads = [None if gx is None else (gx[0] if single else gx), gk]
		if bias is not None:
			grads.append(g4.sum(axis=(0, 2, 3)))
		return grads

	return make_result("conv2d", out[0] if single else out, parents, adjoint)


def maxpool2d(x, size: int | tuple[int, int]) -> Tensor:
	"""Non-overlapping max pooling over [N x C x H x W]; ragged edges are dropped."""
	x = as_tensor(x)
	if x.ndim != 4:
		raise ShapeError(f"maxpool2d needs a 4-D input, got {x.shape}")
	ph, pw = (size, size) if isinstance(size, int) else size
	n, c, h, w = x.shape
	ho, wo = h // ph, w // pw
	if ho < 1 or wo < 1:
		raise ShapeError(f"maxpool2d: window {ph}x{pw} larger than input {h}x{w}")
	windows = (
		x.data[:, :, : ho * ph, : wo * pw]
		.reshape(n, c, ho, ph, wo, pw)
		.transpose(0, 1, 2, 4, 3, 5)
		.reshape(n, c, ho, wo, ph * pw)
	)
	winner = windows.argmax(axis=-1)[..., None]
	data = np.take_along_axis(windows, winner, axis=-1)[..., 0]

	def adjoint(g):
		gw = np.zeros_like(windows)
		np.put_along_axis(gw, winner, g[..., None], axis=-1)
		gx = np.zeros(x.shape)
		gx[:, :, : ho * ph, : wo * pw] = (
			gw.reshape(n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * ph, wo * pw)
		)
		return (gx,)

	return make_result("maxpool2d", data, (x,), adjoint)


def global_avg_pool(x) -> Tensor:
	"""[N x C x H x W] -> [N x C]."""
	x = as_tensor(x)
	if x.ndim != 4:
		raise ShapeError(f"global_avg_pool needs a 4-D input, got {x.shape}")
	return mean(x, axis=(2, 3))


def batchnorm2d(
	x,
	gamma,
	beta,
	running_mean: np.ndarray,
	running_var: np.ndarray,
	*,
	training: bool,
	momentum: float = 0.9,
	eps: float = 1e-5,
) -> Tensor:
	"""
	Per-channel batch normalisation of [N x C x H x W].

	In training mode batch statistics are used and the running buffers are
	updated in place as ``running = momentum * running + (1 - momentum) * batch``.
	"""
	x = as_tensor(x)
	if x.ndim != 4:
		raise ShapeError(f"batchnorm2d needs a 4-D input, got {x.shape}")
	channels = x.shape[1]
	if running_mean.shape != (channels,) or running_var.shape != (channels,):
		raise ShapeError(f"batchnorm2d: running statistics do not match {channels} channels")
	if training:
		mu = mean(x, axis=(0, 2, 3), keepdims=True)
		centered = sub(x, mu)
		var = mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
		running_mean *= momentum
		running_mean += (1.0 - momentum) * mu.data.reshape(-1)
		running_var *= momentum
		running_var += (1.0 - momentum) * var.data.reshape(-1)
		normalised = div(centered, sqrt(add(var, eps)))
	else:
		shift = running_mean.reshape(1, -1, 1, 1)
		scale = np.sqrt(running_var + eps).reshape(1, -1, 1, 1)
		normalised = div(sub(x, shift), scale)
	return add(mul(normalised, reshape(gamma, (1, channels, 1, 1))), reshape(beta, (1, channels, 1, 1)))


def dropout(x, rate: float, generator: np.random.Generator | None, *, training: bool) -> Tensor:
	"""Inverted dropout; identity at evaluation time or when ``rate`` is 0."""
	x = as_tensor(x)
	if not training or rate <= 0.0:
		return x
	if generator is None:
		raise ContractError("dropout in training mode needs a seeded generator")
	mask = (generator.random(x.shape) >= rate) / (1.0 - rate)
	return mul(x, mask)


def mse(x, y) -> Tensor:
	"""Mean squared error over every element."""
	x, y = as_tensor(x), as_tensor(y)
	if x.shape != y.shape:
		raise ShapeError(f"mse: shapes {x.shape} and {y.shape} differ")
	diff = x.data - y.data
	scale = 2.0 / diff.size
	return make_result(
		"mse",
		np.array(np.mean(diff * diff)),
		(x, y),
		lambda g: (g * scale * diff, -g * scale * diff),
	)


def cross_entropy(probs, labels) -> Tensor:
	"""Mean negative log-probability of the labelled class; probabilities floored at 1e-12."""
	probs = as_tensor(probs)
	labels = np.asarray(labels, dtype=np.int64)
	if probs.ndim != 2 or labels.shape != (probs.shape[0],):
		raise ShapeError(f"cross_entropy: probabilities {probs.shape} vs labels {labels.shape}")
	if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
		raise ShapeError(f"cross_entropy: label outside [0, {probs.shape[1]})")
	rows = np.arange(labels.size)
	picked = probs.data[rows, labels]
	clipped = np.maximum(picked, PROB_FLOOR)

	def adjoint(g):
		grad = np.zeros(probs.shape)
		grad[rows, labels] = np.where(picked > PROB_FLOOR, -g / (labels.size * clipped), 0.0)
		return (grad,)

	return make_result("cross_entropy", np.array(-np.mean(np.log(clipped))), (probs,), adjoint)
