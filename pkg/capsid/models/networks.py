"""
Model definitions: CapsNet-M, the single-conv Caps-9/15/19 variants and the
baseline CNN.

Layer geometry is described by ConvSpec strings (``channels@khxkw/shxsw``)
so test-sized models go through exactly the same code as the full ones:

    capsnet_m     64@15x15/1x5 -> 256@13x13 -> primary 256@11x11/2x2
    caps9/15/19   256@KxK -> primary 256@9x9/2x2
    baseline_cnn  128@Fx13 -> 256@1x11 -> 256@1x5/1x2 -> 128@1x3

The last capsule-model layer is the primary-capsule conv; its channels are
split into ``primary_dim``-sized capsule vectors. The baseline CNN's first
kernel spans all F coefficient rows and later layers run along time, with
1x2 max pooling after each of the first three convs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import json
import logging
from pathlib import Path
import re
from typing import Any

import numpy as np

from capsid.autodiff import ops
from capsid.autodiff.checkpoint import load_checkpoint, save_checkpoint
from capsid.autodiff.tensor import Tensor, as_tensor, no_grad
from capsid.core.config import to_flat_dict
from capsid.core.errors import ConfigError, ContractError, DivergenceError, NumericFaultError, ShapeError
from capsid.core.seeding import derive_seed, rng
from capsid.models.capsules import RoutingState, mask_digitcaps, predict_vectors, route, squash
from capsid.models.losses import LossConfig, margin_loss, reconstruction_loss, total_loss

logger = logging.getLogger(__name__)

CAPSULE_SIGMA = 0.01
CNN_POOL = (1, 2)
BN_MOMENTUM = 0.9
CONFIG_NAME = "config.json"
CHECKPOINT_NAME = "best.capw"

_SPEC_RE = re.compile(r"^(\d+)@(\d+)x(\d+)(?:/(\d+)x(\d+))?$")


class Architecture(str, Enum):
	CAPSNET_M = "capsnet_m"
	CAPS9 = "caps9"
	CAPS15 = "caps15"
	CAPS19 = "caps19"
	BASELINE_CNN = "baseline_cnn"

	@property
	def is_capsule(self) -> bool:
		return self is not Architecture.BASELINE_CNN


@dataclass(frozen=True)
class ConvSpec:
	channels: int
	kernel: tuple[int, int]
	stride: tuple[int, int] = (1, 1)

	@classmethod
	def parse(cls, text: str) -> ConvSpec:
		match = _SPEC_RE.match(text.strip())
		if not match:
			raise ValueError(f"layer {text!r} is not channels@KHxKW[/SHxSW]")
		channels, kh, kw, sh, sw = match.groups()
		stride = (int(sh), int(sw)) if sh else (1, 1)
		spec = cls(int(channels), (int(kh), int(kw)), stride)
		if min(spec.channels, *spec.kernel, *spec.stride) < 1:
			raise ValueError(f"layer {text!r} has a zero size")
		return spec

	def __str__(self) -> str:
		text = f"{self.channels}@{self.kernel[0]}x{self.kernel[1]}"
		if self.stride != (1, 1):
			text += f"/{self.stride[0]}x{self.stride[1]}"
		return text

	def output_size(self, rows: int, cols: int) -> tuple[int, int]:
		return (
			ops.conv_output_size(rows, self.kernel[0], self.stride[0]),
			ops.conv_output_size(cols, self.kernel[1], self.stride[1]),
		)


def default_layers(architecture: Architecture, n_features: int) -> tuple[str, ...]:
	if architecture is Architecture.CAPSNET_M:
		return ("64@15x15/1x5", "256@13x13", "256@11x11/2x2")
	if architecture is Architecture.BASELINE_CNN:
		return (f"128@{n_features}x13", "256@1x11", "256@1x5/1x2", "128@1x3")
	size = {Architecture.CAPS9: 9, Architecture.CAPS15: 15, Architecture.CAPS19: 19}[architecture]
	return (f"256@{size}x{size}", "256@9x9/2x2")


@dataclass(frozen=True)
class ModelConfig:
	architecture: str = Architecture.CAPSNET_M.value
	n_classes: int = 2
	n_features: int = 40
	target_frames: int = 300
	routing_iterations: int = 3
	decoder_enabled: bool = True
	decoder_hidden: int = 512
	dropout_rate: float = 0.3
	# first capsule-model conv kernel height; 1 gives time-only kernels
	kernel_height: int | None = None
	primary_dim: int = 8
	digit_dim: int = 16
	layers: tuple[str, ...] = ()
	seed: int = 0

	@property
	def arch(self) -> Architecture:
		return Architecture(self.architecture)

	def conv_specs(self) -> list[ConvSpec]:
		texts = self.layers or default_layers(self.arch, self.n_features)
		specs = [ConvSpec.parse(text) for text in texts]
		if self.kernel_height is not None and self.arch.is_capsule:
			first = specs[0]
			specs[0] = ConvSpec(first.channels, (self.kernel_height, first.kernel[1]), first.stride)
		return specs

	def validate(self) -> list[str]:
		problems = []
		try:
			arch = self.arch
		except ValueError:
			names = ", ".join(a.value for a in Architecture)
			return [f"model.architecture: {self.architecture!r} is not one of {names}"]
		if self.n_classes < 2:
			problems.append(f"model.n_classes: need at least 2 speakers, got {self.n_classes}")
		if self.n_features < 1 or self.target_frames < 1:
			problems.append("model.n_features/target_frames: must be positive")
		if self.routing_iterations < 1:
			problems.append(f"model.routing_iterations: must be >= 1, got {self.routing_iterations}")
		if self.decoder_hidden < 1:
			problems.append("model.decoder_hidden: must be positive")
		if not 0.0 <= self.dropout_rate < 1.0:
			problems.append(f"model.dropout_rate: {self.dropout_rate} not in [0, 1)")
		if self.kernel_height is not None and self.kernel_height < 1:
			problems.append("model.kernel_height: must be positive")
		if self.primary_dim < 1 or self.digit_dim < 1:
			problems.append("model.primary_dim/digit_dim: must be positive")
		try:
			specs = self.conv_specs()
		except ValueError as exc:
			problems.append(f"model.layers: {exc}")
			return problems
		if arch.is_capsule:
			if len(specs) < 1:
				problems.append("model.layers: capsule models need at least the primary-capsule layer")
			elif specs[-1].channels % self.primary_dim:
				problems.append(
					f"model.layers: primary channels {specs[-1].channels} not divisible by primary_dim {self.primary_dim}"
				)
		elif len(specs) != 4:
			problems.append(f"model.layers: baseline_cnn takes exactly 4 conv layers, got {len(specs)}")
		return problems

	def to_json_dict(self) -> dict[str, Any]:
		return to_flat_dict(self)

	@classmethod
	def from_json_dict(cls, data: dict[str, Any]) -> ModelConfig:
		known = set(cls.__dataclass_fields__)
		unknown = sorted(set(data) - known)
		if unknown:
			raise ConfigError([f"model.{key}: unknown key" for key in unknown])
		values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
		return cls(**values)


@dataclass(frozen=True)
class Stage:
	name: str
	kind: str
	channels: int
	rows: int
	cols: int


def _stages(cfg: ModelConfig, frames: int) -> list[Stage]:
	"""Output geometry of every layer for an input of ``frames`` columns (sizes may go < 1)."""
	specs = cfg.conv_specs()
	rows, cols = cfg.n_features, frames
	stages: list[Stage] = []
	for k, spec in enumerate(specs, start=1):
		rows, cols = spec.output_size(rows, cols)
		is_primary = cfg.arch.is_capsule and k == len(specs)
		stages.append(Stage("primary" if is_primary else f"conv{k}", "conv", spec.channels, rows, cols))
		if not cfg.arch.is_capsule and k <= 3:
			rows, cols = rows // CNN_POOL[0], cols // CNN_POOL[1]
			stages.append(Stage(f"pool{k}", "pool", spec.channels, rows, cols))
	return stages


def min_frames(cfg: ModelConfig) -> int:
	"""
	Smallest target_frames for which every layer output is at least 1x1.

	Raises:
		ConfigError: If the coefficient axis is too short for any frame count.
	"""
	bad_rows = [s.name for s in _stages(cfg, 10**9) if s.rows < 1]
	if bad_rows:
		raise ConfigError(f"{cfg.n_features} feature rows are too few for layer {bad_rows[0]} of {cfg.architecture}")
	needed = 1
	specs = cfg.conv_specs()
	for k in range(len(specs), 0, -1):
		if not cfg.arch.is_capsule and k <= 3:
			needed *= CNN_POOL[1]
		spec = specs[k - 1]
		needed = (needed - 1) * spec.stride[1] + spec.kernel[1]
	return needed


def geometry(cfg: ModelConfig) -> list[Stage]:
	"""Layer output shapes for the configured input; ConfigError if any collapses."""
	stages = _stages(cfg, cfg.target_frames)
	collapsed = [s for s in stages if s.rows < 1 or s.cols < 1]
	if collapsed:
		raise ConfigError(
			f"{cfg.architecture}: input {cfg.n_features}x{cfg.target_frames} collapses at {collapsed[0].name}; "
			f"needs target_frames >= {min_frames(cfg)}"
		)
	return stages


def _glorot(gen: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
	limit = np.sqrt(6.0 / (fan_in + fan_out))
	return gen.uniform(-limit, limit, size=shape)


@dataclass
class ForwardOutput:
	scores: Tensor
	digit_caps: Tensor | None = None
	reconstruction: Tensor | None = None
	routing: RoutingState | None = None


@dataclass(eq=False)
class Model:
	"""
	Parameters plus forward pass for one architecture.

	``params`` keeps insertion order, which is also the checkpoint order.
	Use ``build_model`` rather than constructing directly.
	"""

	cfg: ModelConfig
	params: dict[str, Tensor] = field(default_factory=dict)
	buffers: dict[str, np.ndarray] = field(default_factory=dict)
	training: bool = True

	def __post_init__(self):
		self.stages = geometry(self.cfg)
		self.specs = self.cfg.conv_specs()
		self._dropout_rng = rng(derive_seed(self.cfg.seed, "dropout"))
		if not self.params:
			self._init_params(rng(derive_seed(self.cfg.seed, "init")))

	def _init_params(self, gen: np.random.Generator) -> None:
		channels = 1
		for k, spec in enumerate(self.specs, start=1):
			name = "primary" if self.cfg.arch.is_capsule and k == len(self.specs) else f"conv{k}"
			kh, kw = spec.kernel
			shape = (spec.channels, channels, kh, kw)
			self._add(f"{name}.weight", _glorot(gen, shape, channels * kh * kw, spec.channels * kh * kw))
			self._add(f"{name}.bias", np.zeros(spec.channels))
			if not self.cfg.arch.is_capsule and k == 2:
				self._add("bn2.gamma", np.ones(spec.channels))
				self._add("bn2.beta", np.zeros(spec.channels))
				self.buffers["bn2.running_mean"] = np.zeros(spec.channels)
				self.buffers["bn2.running_var"] = np.ones(spec.channels)
			channels = spec.channels
		if not self.cfg.arch.is_capsule:
			self._add("fc.weight", _glorot(gen, (channels, self.cfg.n_classes), channels, self.cfg.n_classes))
			self._add("fc.bias", np.zeros(self.cfg.n_classes))
			return
		self._add("digit.W", gen.normal(0.0, CAPSULE_SIGMA, size=(self.n_primary, self.cfg.n_classes, self.cfg.digit_dim, self.cfg.primary_dim)))
		if self.cfg.decoder_enabled:
			flat = self.cfg.n_classes * self.cfg.digit_dim
			hidden = self.cfg.decoder_hidden
			out = self.cfg.n_features * self.cfg.target_frames
			self._add("decoder.hidden.weight", _glorot(gen, (flat, hidden), flat, hidden))
			self._add("decoder.hidden.bias", np.zeros(hidden))
			self._add("decoder.out.weight", _glorot(gen, (hidden, out), hidden, out))
			self._add("decoder.out.bias", np.zeros(out))

	def _add(self, name: str, values: np.ndarray) -> None:
		self.params[name] = Tensor(values, requires_grad=True)

	@property
	def n_primary(self) -> int:
		last = self.stages[-1]
		return (last.channels // self.cfg.primary_dim) * last.rows * last.cols

	def parameters(self) -> dict[str, Tensor]:
		return self.params

	def parameter_count(self) -> int:
		return sum(t.size for t in self.params.values())

	def train(self) -> Model:
		self.training = True
		return self

	def eval(self) -> Model:
		self.training = False
		return self

	def state_dict(self) -> dict[str, np.ndarray]:
		state = {name: t.data.copy() for name, t in self.params.items()}
		state.update({name: values.copy() for name, values in self.buffers.items()})
		return state

	def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
		expected = list(self.params) + list(self.buffers)
		if sorted(state) != sorted(expected):
			missing = sorted(set(expected) - set(state))
			extra = sorted(set(state) - set(expected))
			raise ContractError(f"state does not match model (missing {missing}, unexpected {extra})")
		for name, values in state.items():
			target = self.params[name].data if name in self.params else self.buffers[name]
			if np.shape(values) != target.shape:
				raise ContractError(f"{name}: shape {np.shape(values)} != {target.shape}")
		for name, values in state.items():
			if name in self.params:
				self.params[name].data = np.array(values, dtype=np.float64)
			else:
				self.buffers[name] = np.array(values, dtype=np.float64)

	def _as_batch(self, x) -> Tensor:
		x = as_tensor(x)
		if x.ndim == 3:
			x = ops.reshape(x, (x.shape[0], 1) + x.shape[1:])
		expected = (1, self.cfg.n_features, self.cfg.target_frames)
		if x.ndim != 4 or x.shape[1:] != expected:
			raise ShapeError(f"model expects [B x 1 x {expected[1]} x {expected[2]}], got {x.shape}")
		return x

	def forward(self, x, labels=None, *, decode: bool = True) -> ForwardOutput:
		"""
		Args:
			x: [B x 1 x n_features x target_frames] (or without the channel axis).
			labels: Class per item for decoder masking; None masks by prediction.
			decode: Run the decoder (capsule models with a decoder only).
		"""
		x = self._as_batch(x)
		if self.cfg.arch.is_capsule:
			return self._capsule_forward(x, labels, decode)
		return self._cnn_forward(x)

	def _capsule_forward(self, x: Tensor, labels, decode: bool) -> ForwardOutput:
		p = self.params
		h = x
		for k, spec in enumerate(self.specs[:-1], start=1):
			h = ops.relu(ops.conv2d(h, p[f"conv{k}.weight"], p[f"conv{k}.bias"], spec.stride))
		primary = ops.conv2d(h, p["primary.weight"], p["primary.bias"], self.specs[-1].stride)
		batch, channels, rows, cols = primary.shape
		dim = self.cfg.primary_dim
		maps = channels // dim
		u = ops.reshape(primary, (batch, maps, dim, rows, cols))
		u = ops.transpose(u, (0, 1, 3, 4, 2))
		u = squash(ops.reshape(u, (batch, maps * rows * cols, dim)))
		v, state = route(predict_vectors(u, p["digit.W"]), self.cfg.routing_iterations)
		scores = ops.norm(v, axis=-1)
		reconstruction = None
		if self.cfg.decoder_enabled and decode:
			masked = mask_digitcaps(v, labels)
			hidden = ops.relu(ops.dense(masked, p["decoder.hidden.weight"], p["decoder.hidden.bias"]))
			reconstruction = ops.dense(hidden, p["decoder.out.weight"], p["decoder.out.bias"])
		return ForwardOutput(scores, v, reconstruction, state)

	def _cnn_forward(self, x: Tensor) -> ForwardOutput:
		p = self.params
		h = x
		for k, spec in enumerate(self.specs, start=1):
			h = ops.conv2d(h, p[f"conv{k}.weight"], p[f"conv{k}.bias"], spec.stride)
			if k == 2:
				h = ops.batchnorm2d(
					h,
					p["bn2.gamma"],
					p["bn2.beta"],
					self.buffers["bn2.running_mean"],
					self.buffers["bn2.running_var"],
					training=self.training,
					momentum=BN_MOMENTUM,
				)
			h = ops.relu(h)
			if k <= 3:
				h = ops.maxpool2d(h, CNN_POOL)
			if k == 1:
				h = ops.dropout(h, self.cfg.dropout_rate, self._dropout_rng, training=self.training)
		logits = ops.dense(ops.global_avg_pool(h), p["fc.weight"], p["fc.bias"])
		return ForwardOutput(ops.softmax(logits, axis=1))

	def loss(self, x, labels, loss_cfg: LossConfig = LossConfig()) -> tuple[Tensor, ForwardOutput]:
		"""
		Training loss for a batch.

		Capsule models: margin loss plus alpha * MSE against the input
		features when the decoder is on. Baseline CNN: cross-entropy.
		"""
		x = self._as_batch(x)
		labels = np.asarray(labels, dtype=np.int64)
		out = self.forward(x, labels)
		if not self.cfg.arch.is_capsule:
			return ops.cross_entropy(out.scores, labels), out
		margin = margin_loss(out.scores, labels, loss_cfg)
		if out.reconstruction is None:
			return total_loss(margin, None, loss_cfg), out
		target = x.data.reshape(x.shape[0], -1)
		return total_loss(margin, reconstruction_loss(out.reconstruction, target), loss_cfg), out

	def scores(self, x, *, batch_index: int | None = None) -> np.ndarray:
		"""Class scores [B x n_classes] without recording a graph."""
		try:
			with no_grad():
				return self.forward(x, decode=False).scores.data
		except NumericFaultError as exc:
			raise DivergenceError(f"forward pass: {exc}", batch=batch_index) from exc

	def predict(self, x) -> np.ndarray:
		return predict_classes(self.scores(x))

	def reconstruct(self, x, labels=None) -> np.ndarray:
		"""Decoder output reshaped to [B x n_features x target_frames]."""
		if not (self.cfg.arch.is_capsule and self.cfg.decoder_enabled):
			raise ContractError(f"{self.cfg.architecture} has no decoder")
		with no_grad():
			out = self.forward(x, labels)
		return out.reconstruction.data.reshape(-1, self.cfg.n_features, self.cfg.target_frames)


def predict_classes(scores: np.ndarray) -> np.ndarray:
	"""Argmax per row; exact ties go to the lowest class index."""
	scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
	return np.argmax(scores, axis=1)


def build_model(cfg: ModelConfig) -> Model:
	problems = cfg.validate()
	if problems:
		raise ConfigError(problems)
	model = Model(cfg)
	logger.debug(
		"built %s: %d parameters, stages %s",
		cfg.architecture,
		model.parameter_count(),
		", ".join(f"{s.name} {s.channels}x{s.rows}x{s.cols}" for s in model.stages),
	)
	return model


def save_model_config(path: str | Path, cfg: ModelConfig) -> Path:
	target = Path(path)
	target.parent.mkdir(parents=True, exist_ok=True)
	target.write_text(json.dumps(cfg.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
	return target


def load_model_config(path: str | Path) -> ModelConfig:
	try:
		data = json.loads(Path(path).read_text(encoding="utf-8"))
	except (OSError, json.JSONDecodeError) as exc:
		raise ConfigError(f"cannot read model config {path}: {exc}") from exc
	return ModelConfig.from_json_dict(data)


def save_model(model: Model, directory: str | Path, name: str = CHECKPOINT_NAME) -> Path:
	"""Write ``<directory>/<name>`` and the ``config.json`` sidecar; returns the checkpoint path."""
	directory = Path(directory)
	save_model_config(directory / CONFIG_NAME, model.cfg)
	return save_checkpoint(directory / name, model.state_dict())


def load_model(directory: str | Path, name: str = CHECKPOINT_NAME) -> Model:
	directory = Path(directory)
	model = build_model(load_model_config(directory / CONFIG_NAME))
	model.load_state_dict(load_checkpoint(directory / name))
	return model.eval()
