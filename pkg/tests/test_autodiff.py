import inspect
import threading

import numpy as np
import pytest

from capsid.autodiff import ops
from capsid.autodiff.tensor import Tensor, backward, is_grad_enabled, no_grad, trace
from capsid.core.errors import ContractError, NumericFaultError, ShapeError
from capsid.core.seeding import derive_seed, rng

H = 1e-5
REL_TOL = 1e-5
# gradient entries smaller than this are compared absolutely
REL_FLOOR = 1e-2
SHAPE_DRAWS = 10


def numeric_grad(fn, arrays, k, weights):
	"""Central differences of sum(fn(*arrays) * weights) with respect to arrays[k]."""
	shifted = [a.copy() for a in arrays]
	target = shifted[k]
	grad = np.zeros_like(target)
	for idx in np.ndindex(target.shape):
		original = target[idx]
		target[idx] = original + H
		upper = np.sum(fn(*[Tensor(a.copy()) for a in shifted]).data * weights)
		target[idx] = original - H
		lower = np.sum(fn(*[Tensor(a.copy()) for a in shifted]).data * weights)
		target[idx] = original
		grad[idx] = (upper - lower) / (2 * H)
	return grad


def relative_error(analytic, numeric):
	if analytic.size == 0:
		return 0.0
	scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
	return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(fn, *arrays, seed=0):
	arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
	tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
	out = fn(*tensors)
	weights = np.random.default_rng(seed).standard_normal(out.shape)
	ops.sum(ops.mul(out, weights)).backward()
	for k, t in enumerate(tensors):
		assert t.grad is not None, f"input {k} has no gradient"
		assert t.grad.dtype == np.float64
		error = relative_error(t.grad, numeric_grad(fn, arrays, k, weights))
		assert error <= REL_TOL, f"input {k} of shape {arrays[k].shape}: relative error {error:.3g}"


def _rand(*shape, seed=1, low=-1.0, high=1.0):
	return np.random.default_rng(seed).uniform(low, high, shape)


GRADIENT_CASES = {}


def gradient_case(name):
	def register(draw):
		GRADIENT_CASES[name] = draw
		return draw

	return register


def _shape(gen, ndim, low=1, high=4):
	return tuple(int(n) for n in gen.integers(low, high + 1, size=ndim))


def _signed(gen, shape, low=0.2, high=1.0):
	"""Magnitudes in [low, high] with random signs, clear of zero."""
	return gen.uniform(low, high, shape) * gen.choice((-1.0, 1.0), size=shape)


def _broadcast_shapes(gen):
	shape = _shape(gen, int(gen.integers(1, 4)))
	start = int(gen.integers(0, len(shape)))
	other = tuple(1 if gen.random() < 0.3 else n for n in shape[start:])
	return (other, shape) if gen.random() < 0.5 else (shape, other)


def _axis(gen, ndim):
	pick = int(gen.integers(0, 3))
	if pick == 0:
		return None
	if pick == 1:
		return int(gen.integers(0, ndim))
	count = int(gen.integers(1, ndim + 1))
	return tuple(sorted(int(a) for a in gen.choice(ndim, size=count, replace=False)))


def _elementwise(op):
	def draw(gen):
		a, b = _broadcast_shapes(gen)
		return op, [gen.uniform(-1, 1, a), gen.uniform(-1, 1, b)]

	return draw


for _name in ("add", "sub", "mul"):
	gradient_case(_name)(_elementwise(getattr(ops, _name)))


@gradient_case("div")
def _div(gen):
	a, b = _broadcast_shapes(gen)
	return ops.div, [gen.uniform(-1, 1, a), _signed(gen, b, 0.5, 1.5)]


def _unary(op, low, high):
	def draw(gen):
		return op, [gen.uniform(low, high, _shape(gen, int(gen.integers(1, 4))))]

	return draw


for _name, _low, _high in (("neg", -1.0, 1.0), ("exp", -1.0, 1.5), ("log", 0.5, 2.0), ("sqrt", 0.5, 2.0), ("sigmoid", -3.0, 3.0)):
	gradient_case(_name)(_unary(getattr(ops, _name), _low, _high))


@gradient_case("power")
def _power(gen):
	exponent = float(gen.choice([-0.5, 1.5, 2.0, 3.0]))
	return (lambda x: ops.power(x, exponent)), [gen.uniform(0.5, 2.0, _shape(gen, int(gen.integers(1, 4))))]


@gradient_case("relu")
def _relu(gen):
	return ops.relu, [_signed(gen, _shape(gen, int(gen.integers(1, 4))))]


def _reduction(op):
	def draw(gen):
		shape = _shape(gen, int(gen.integers(1, 4)))
		axis, keepdims = _axis(gen, len(shape)), bool(gen.random() < 0.5)
		return (lambda x: op(x, axis=axis, keepdims=keepdims)), [gen.uniform(-1, 1, shape)]

	return draw


gradient_case("sum")(_reduction(ops.sum))
gradient_case("mean")(_reduction(ops.mean))


@gradient_case("norm")
def _norm(gen):
	shape = _shape(gen, int(gen.integers(1, 4)))
	axis, keepdims = int(gen.integers(0, len(shape))), bool(gen.random() < 0.5)
	return (lambda x: ops.norm(x, axis=axis, keepdims=keepdims)), [_signed(gen, shape)]


@gradient_case("softmax")
def _softmax(gen):
	shape = _shape(gen, int(gen.integers(1, 4)))
	axis = int(gen.integers(0, len(shape)))
	return (lambda x: ops.softmax(x, axis=axis)), [gen.uniform(-3, 3, shape)]


@gradient_case("reshape")
def _reshape(gen):
	shape = _shape(gen, int(gen.integers(2, 4)))
	return (lambda x: ops.reshape(x, shape[::-1])), [gen.uniform(-1, 1, shape)]


@gradient_case("transpose")
def _transpose(gen):
	shape = _shape(gen, int(gen.integers(2, 4)))
	axes = tuple(int(a) for a in gen.permutation(len(shape)))
	return (lambda x: ops.transpose(x, axes)), [gen.uniform(-1, 1, shape)]


@gradient_case("take")
def _take(gen):
	shape = _shape(gen, int(gen.integers(1, 4)))
	axis = int(gen.integers(0, len(shape)))
	indices = gen.integers(0, shape[axis], size=int(gen.integers(1, 5)))
	return (lambda x: ops.take(x, indices, axis=axis)), [gen.uniform(-1, 1, shape)]


@gradient_case("matmul")
def _matmul(gen):
	m, k, n = _shape(gen, 3)
	batch = _shape(gen, 1) if gen.random() < 0.5 else ()
	return ops.matmul, [gen.uniform(-1, 1, batch + (m, k)), gen.uniform(-1, 1, (k, n))]


@gradient_case("dense")
def _dense(gen):
	n, i, o = _shape(gen, 3)
	return ops.dense, [gen.uniform(-1, 1, (n, i)), gen.uniform(-1, 1, (i, o)), gen.uniform(-1, 1, (o,))]


@gradient_case("einsum")
def _einsum(gen):
	subscripts = str(gen.choice(["ijkl,bil->bijk", "bij,bijk->bjk", "bijk,bjk->bij", "ij,jk->ik"]))
	dims = {c: int(gen.integers(1, 4)) for c in sorted(set(subscripts) - set(",->"))}
	a_sub, b_sub = subscripts.split("->")[0].split(",")
	arrays = [gen.uniform(-1, 1, tuple(dims[c] for c in sub)) for sub in (a_sub, b_sub)]
	return (lambda a, b: ops.einsum(subscripts, a, b)), arrays


@gradient_case("conv2d")
def _conv2d(gen):
	n, c, o = int(gen.integers(1, 3)), int(gen.integers(1, 3)), int(gen.integers(1, 4))
	kh, kw = _shape(gen, 2, 1, 3)
	stride = _shape(gen, 2, 1, 2)
	h, w = kh + int(gen.integers(0, 4)), kw + int(gen.integers(0, 4))
	x_shape = (c, h, w) if gen.random() < 0.3 else (n, c, h, w)
	arrays = [gen.uniform(-1, 1, x_shape), gen.uniform(-1, 1, (o, c, kh, kw)), gen.uniform(-1, 1, (o,))]
	return (lambda x, k, b: ops.conv2d(x, k, b, stride=stride)), arrays


@gradient_case("maxpool2d")
def _maxpool2d(gen):
	ph, pw = _shape(gen, 2, 1, 3)
	n, c = _shape(gen, 2, 1, 2)
	h, w = ph * int(gen.integers(1, 3)) + int(gen.integers(0, 2)), pw * int(gen.integers(1, 3)) + int(gen.integers(0, 2))
	# distinct values 0.5 apart
	values = 0.5 * gen.permutation(n * c * h * w).reshape(n, c, h, w).astype(np.float64)
	return (lambda x: ops.maxpool2d(x, (ph, pw))), [values]


@gradient_case("global_avg_pool")
def _global_avg_pool(gen):
	return ops.global_avg_pool, [gen.uniform(-1, 1, _shape(gen, 4))]


@gradient_case("batchnorm2d")
def _batchnorm2d(gen):
	n, c, h, w = int(gen.integers(2, 4)), int(gen.integers(1, 4)), int(gen.integers(2, 4)), int(gen.integers(2, 4))
	arrays = [gen.uniform(-1, 1, (n, c, h, w)), gen.uniform(0.5, 1.5, (c,)), gen.uniform(-1, 1, (c,))]
	if gen.random() < 0.7:
		return (lambda x, g, b: ops.batchnorm2d(x, g, b, np.zeros(c), np.ones(c), training=True)), arrays
	running_mean, running_var = gen.uniform(-1, 1, (c,)), gen.uniform(0.5, 1.5, (c,))
	return (lambda x, g, b: ops.batchnorm2d(x, g, b, running_mean.copy(), running_var.copy(), training=False)), arrays


@gradient_case("dropout")
def _dropout(gen):
	rate, mask_seed = float(gen.choice([0.2, 0.5])), int(gen.integers(0, 2**31))
	shape = _shape(gen, int(gen.integers(1, 4)))
	return (lambda x: ops.dropout(x, rate, np.random.default_rng(mask_seed), training=True)), [gen.uniform(-1, 1, shape)]


@gradient_case("mse")
def _mse(gen):
	shape = _shape(gen, int(gen.integers(1, 4)))
	return ops.mse, [gen.uniform(-1, 1, shape), gen.uniform(-1, 1, shape)]


@gradient_case("cross_entropy")
def _cross_entropy(gen):
	n, k = int(gen.integers(1, 5)), int(gen.integers(2, 5))
	probs = gen.uniform(0.2, 1.0, (n, k))
	probs /= probs.sum(axis=1, keepdims=True)
	labels = gen.integers(0, k, size=n)
	return (lambda p: ops.cross_entropy(p, labels)), [probs]


def test_gradient_cases_cover_every_op():
	public = {
		name
		for name, obj in vars(ops).items()
		if inspect.isfunction(obj) and obj.__module__ == ops.__name__ and not name.startswith("_")
	}
	assert set(GRADIENT_CASES) == public - {"conv_output_size"}


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_op_gradients_over_random_shapes(name):
	gen = rng(derive_seed(11, name))
	shapes = set()
	for draw in range(SHAPE_DRAWS):
		fn, arrays = GRADIENT_CASES[name](gen)
		shapes.add(tuple(a.shape for a in arrays))
		check_gradients(fn, *arrays, seed=draw)
	assert len(shapes) > 1


def test_relu_gradient_away_from_kink():
	x = np.array([[-2.0, -0.5, 0.5], [1.5, -1.0, 3.0]])
	check_gradients(ops.relu, x)
	t = Tensor(x, requires_grad=True)
	ops.sum(ops.relu(t)).backward()
	assert t.grad.tolist() == [[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]]


def test_sum_gradient_is_all_ones():
	t = Tensor(_rand(3, 2), requires_grad=True)
	ops.sum(t).backward()
	assert np.array_equal(t.grad, np.ones((3, 2)))


def test_norm_gradient_and_zero_vector():
	check_gradients(lambda t: ops.norm(t, axis=-1), _rand(3, 4))
	check_gradients(lambda t: ops.norm(t, axis=1, keepdims=True), _rand(2, 3, 2))
	t = Tensor(np.zeros((1, 3)), requires_grad=True)
	ops.sum(ops.norm(t, axis=-1)).backward()
	assert not t.grad.any()


def test_softmax_rows_and_gradient():
	x = _rand(4, 5) * 5
	out = ops.softmax(Tensor(x), axis=1)
	assert np.allclose(out.data.sum(axis=1), 1.0)
	assert np.all(out.data > 0)
	check_gradients(lambda t: ops.softmax(t, axis=1), x)
	check_gradients(lambda t: ops.softmax(t, axis=0), x)


def test_softmax_is_shift_invariant():
	x = _rand(2, 3)
	assert np.allclose(ops.softmax(Tensor(x + 700.0)).data, ops.softmax(Tensor(x)).data)


def test_shape_op_gradients():
	x = _rand(2, 3, 4)
	check_gradients(lambda t: ops.reshape(t, (6, 4)), x)
	check_gradients(lambda t: ops.transpose(t, (2, 0, 1)), x)
	check_gradients(lambda t: ops.take(t, [2, 0, 2], axis=1), x)
	with pytest.raises(ShapeError):
		ops.reshape(Tensor(x), (5, 5))
	with pytest.raises(ShapeError):
		ops.take(Tensor(x), [3], axis=1)


def test_take_accumulates_repeated_indices():
	t = Tensor(np.arange(3.0), requires_grad=True)
	ops.sum(ops.take(t, [1, 1, 2])).backward()
	assert t.grad.tolist() == [0.0, 2.0, 1.0]


def test_matmul_and_dense_gradients():
	check_gradients(ops.matmul, _rand(3, 4), _rand(4, 2, seed=2))
	check_gradients(ops.matmul, _rand(2, 3, 4), _rand(4, 5, seed=2))
	check_gradients(ops.dense, _rand(3, 4), _rand(4, 2, seed=2), _rand(2, seed=3))
	with pytest.raises(ShapeError):
		ops.matmul(Tensor(_rand(3, 4)), Tensor(_rand(3, 4)))


def test_einsum_matches_numpy_and_differentiates():
	w = _rand(3, 2, 4, 5)
	u = _rand(6, 3, 5, seed=2)
	out = ops.einsum("ijkl,bil->bijk", Tensor(w), Tensor(u))
	assert np.allclose(out.data, np.einsum("ijkl,bil->bijk", w, u))
	check_gradients(lambda a, b: ops.einsum("ijkl,bil->bijk", a, b), _rand(2, 2, 3, 2), _rand(3, 2, 2, seed=2))
	check_gradients(lambda a, b: ops.einsum("bij,bijk->bjk", a, b), _rand(2, 3, 2), _rand(2, 3, 2, 4, seed=2))
	check_gradients(lambda a, b: ops.einsum("bijk,bjk->bij", a, b), _rand(2, 3, 2, 4), _rand(2, 2, 4, seed=2))


def test_einsum_rejects_implicit_forms():
	a, b = Tensor(_rand(2, 2)), Tensor(_rand(2, 2))
	with pytest.raises(ShapeError):
		ops.einsum("ij,jk", a, b)
	with pytest.raises(ShapeError):
		ops.einsum("ii,ij->j", a, b)
	with pytest.raises(ShapeError):
		ops.einsum("ijk,jk->i", a, b)


def test_conv2d_output_shape():
	x = Tensor(np.zeros((1, 1, 40, 72)))
	k = Tensor(np.zeros((64, 1, 15, 15)))
	assert ops.conv2d(x, k).shape == (1, 64, 26, 58)
	assert ops.conv2d(Tensor(np.zeros((1, 40, 72))), k).shape == (64, 26, 58)
	assert ops.conv2d(x, Tensor(np.zeros((8, 1, 3, 3))), stride=(2, 2)).shape == (1, 8, 19, 35)


def test_conv2d_identity_kernel():
	x = _rand(2, 1, 5, 6)
	k = np.zeros((1, 1, 3, 3))
	k[0, 0, 1, 1] = 1.0
	out = ops.conv2d(Tensor(x), Tensor(k))
	assert np.allclose(out.data, x[:, :, 1:-1, 1:-1])


def test_conv2d_matches_direct_sum():
	x = _rand(1, 2, 5, 5)
	k = _rand(3, 2, 2, 3, seed=4)
	out = ops.conv2d(Tensor(x), Tensor(k), stride=(2, 1)).data
	for o in range(3):
		for i in range(out.shape[2]):
			for j in range(out.shape[3]):
				patch = x[0, :, 2 * i : 2 * i + 2, j : j + 3]
				assert out[0, o, i, j] == pytest.approx(np.sum(patch * k[o]))


@pytest.mark.parametrize("stride", [(1, 1), (2, 2), (1, 2)])
def test_conv2d_gradients(stride):
	check_gradients(
		lambda x, k, b: ops.conv2d(x, k, b, stride=stride),
		_rand(2, 2, 5, 6),
		_rand(3, 2, 3, 2, seed=2),
		_rand(3, seed=3),
	)


def test_conv2d_shape_errors():
	with pytest.raises(ShapeError):
		ops.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))))
	with pytest.raises(ShapeError):
		ops.conv2d(Tensor(np.zeros((1, 1, 2, 5))), Tensor(np.zeros((1, 1, 3, 3))))


def test_maxpool_values_and_gradient():
	x = np.random.default_rng(5).permutation(2 * 2 * 4 * 5).reshape(2, 2, 4, 5).astype(float)
	out = ops.maxpool2d(Tensor(x), (2, 2))
	assert out.shape == (2, 2, 2, 2)
	assert out.data[0, 0, 0, 0] == x[0, 0, :2, :2].max()
	check_gradients(lambda t: ops.maxpool2d(t, (1, 2)), x)
	check_gradients(lambda t: ops.maxpool2d(t, 2), x)


def test_batchnorm_training_and_eval():
	x = _rand(4, 3, 2, 2)
	running_mean, running_var = np.zeros(3), np.ones(3)
	out = ops.batchnorm2d(x, np.ones(3), np.zeros(3), running_mean, running_var, training=True)
	assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
	assert np.allclose(running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
	evaluated = ops.batchnorm2d(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=False)
	assert np.allclose(evaluated.data, x / np.sqrt(1 + 1e-5))
	check_gradients(
		lambda t, g, b: ops.batchnorm2d(t, g, b, np.zeros(3), np.ones(3), training=True),
		x,
		_rand(3, seed=2, low=0.5, high=1.5),
		_rand(3, seed=3),
	)


def test_dropout_modes():
	x = Tensor(np.ones((50, 40)))
	assert ops.dropout(x, 0.3, None, training=False) is x
	out = ops.dropout(x, 0.5, np.random.default_rng(0), training=True)
	assert set(np.unique(out.data)) <= {0.0, 2.0}
	assert 0.4 < np.mean(out.data == 0.0) < 0.6
	with pytest.raises(ContractError):
		ops.dropout(x, 0.5, None, training=True)


def test_mse_and_cross_entropy():
	x, y = _rand(3, 4), _rand(3, 4, seed=2)
	assert ops.mse(Tensor(x), Tensor(y)).item() == pytest.approx(np.mean((x - y) ** 2))
	check_gradients(ops.mse, x, y)
	probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
	assert ops.cross_entropy(Tensor(probs), [0, 2]).item() == pytest.approx(-(np.log(0.7) + np.log(0.8)) / 2)
	check_gradients(lambda p: ops.cross_entropy(p, [0, 2]), probs)
	with pytest.raises(ShapeError):
		ops.cross_entropy(Tensor(probs), [0, 3])


def test_backward_needs_scalar_loss():
	t = Tensor(np.ones(3), requires_grad=True)
	with pytest.raises(ContractError, match="scalar"):
		backward(ops.mul(t, 2.0))
	with pytest.raises(ContractError):
		backward(Tensor(1.0))


def test_non_finite_values_fault():
	with pytest.raises(NumericFaultError):
		ops.log(Tensor(np.array([0.0, 1.0])))
	with pytest.raises(NumericFaultError):
		ops.div(Tensor(1.0), Tensor(0.0))
	with pytest.raises(NumericFaultError):
		ops.exp(Tensor(1000.0))


def test_gradients_accumulate_across_uses():
	t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
	y = ops.add(ops.mul(t, t), t)
	ops.sum(y).backward()
	assert t.grad.tolist() == [3.0, 5.0]
	ops.sum(t).backward()
	assert t.grad.tolist() == [4.0, 6.0]
	t.zero_grad()
	assert t.grad is None


def test_no_grad_records_nothing_and_is_thread_local():
	t = Tensor(np.ones(2), requires_grad=True)
	seen = []

	def other_thread():
		seen.append(is_grad_enabled())

	with no_grad():
		out = ops.mul(t, 3.0)
		worker = threading.Thread(target=other_thread)
		worker.start()
		worker.join()
	assert out.requires_grad is False
	assert out.parents == ()
	assert seen == [True]
	assert is_grad_enabled()


def test_trace_lists_nodes_in_construction_order():
	a = Tensor(np.ones(2), requires_grad=True)
	b = Tensor(np.ones(2))
	loss = ops.sum(ops.relu(ops.mul(a, b)))
	graph = trace(loss)
	assert graph.ops() == ["leaf", "mul", "relu", "sum"]
	seqs = [node.seq for node in graph.nodes]
	assert seqs == sorted(seqs)
	assert graph.nodes[1].inputs == (a.seq, b.seq)


def test_operator_sugar():
	a = Tensor(np.array([2.0, 4.0]), requires_grad=True)
	out = ((a * 3 - 1) / 2) ** 2 + (-a)
	out2 = 1 - a
	assert np.allclose(out.data, ((np.array([2.0, 4.0]) * 3 - 1) / 2) ** 2 - np.array([2.0, 4.0]))
	assert out2.data.tolist() == [-1.0, -3.0]
	m = Tensor(np.eye(2)) @ Tensor(np.array([[1.0], [2.0]]))
	assert m.data.ravel().tolist() == [1.0, 2.0]


def test_mse_gradient_matches_closed_form():
	W = Tensor(np.array([[1.0, 2.0], [0.5, -1.0]]), requires_grad=True)
	x = np.array([[3.0], [1.0]])
	y = np.array([[4.0], [0.0]])
	ops.mse(ops.matmul(W, x), y).backward()
	residual = W.data @ x - y
	assert residual.ravel().tolist() == [1.0, 0.5]
	assert np.allclose(W.grad, residual @ x.T)
	assert np.allclose(W.grad, [[3.0, 1.0], [1.5, 0.5]])
	assert ops.mse(Tensor(x), x).item() == 0.0
