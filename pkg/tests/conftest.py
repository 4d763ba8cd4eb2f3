from __future__ import annotations

import struct
from typing import Any, Callable, Iterable

import numpy as np
import pytest

from capsid.core.runner import TaskResult
from capsid.corpus.synthetic import generate_synthetic_corpus
from capsid.corpus.types import AudioClip, CorpusKind, CorpusManifest, Emotion, ManifestEntry
from capsid.features.archive import extract_archive
from capsid.features.mfcc import FeatureConfig
from capsid.models.networks import ModelConfig

MICRO_FRAMES = 8
MICRO_CAPSULE_LAYERS = ("4@3x3", "8@3x3", "16@3x3/2x2")
MICRO_CNN_LAYERS = ("8@40x3", "8@1x3", "8@1x3/1x2", "8@1x1")


class FakeRunner:
	"""Serial runner that records every map call and can fail chosen items."""

	def __init__(self, fail: Iterable[int] = ()):
		self.workers = 1
		self.calls: list[int] = []
		self.fail = set(fail)

	def map(self, fn: Callable[[Any], Any], items) -> list[TaskResult]:
		items = list(items)
		self.calls.append(len(items))
		results = []
		for i, item in enumerate(items):
			if i in self.fail:
				exc = RuntimeError(f"scripted failure {i}")
				results.append(TaskResult(i, None, f"RuntimeError: {exc}", exc))
				continue
			try:
				results.append(TaskResult(i, fn(item)))
			except Exception as exc:
				results.append(TaskResult(i, None, f"{type(exc).__name__}: {exc}", exc))
		return results


@pytest.fixture
def make_runner():
	def _make(fail: Iterable[int] = ()) -> FakeRunner:
		return FakeRunner(fail)

	return _make


@pytest.fixture
def make_clip():
	def _make(samples=None, rate: int = 16000, seconds: float = 0.5, freq: float = 440.0, amplitude: float = 0.3) -> AudioClip:
		if samples is None:
			t = np.arange(int(round(seconds * rate))) / rate
			samples = amplitude * np.sin(2 * np.pi * freq * t)
		return AudioClip(np.asarray(samples, dtype=np.float64), rate)

	return _make


@pytest.fixture
def wav_bytes():
	"""Build WAV images chunk by chunk so malformed files are easy to describe."""

	def chunk(chunk_id: bytes, body: bytes) -> bytes:
		pad = b"\x00" if len(body) % 2 else b""
		return chunk_id + struct.pack("<I", len(body)) + body + pad

	def fmt_body(tag: int, channels: int, rate: int, bits: int, extensible_tag: int | None = None) -> bytes:
		align = channels * bits // 8
		body = struct.pack("<HHIIHH", tag, channels, rate, rate * align, align, bits)
		if extensible_tag is not None:
			body += struct.pack("<HHI", 22, bits, 0) + struct.pack("<H", extensible_tag) + b"\x00" * 14
		return body

	def _build(
		samples,
		*,
		rate: int = 16000,
		channels: int = 1,
		float32: bool = False,
		extensible: bool = False,
		extra_chunks: tuple[tuple[bytes, bytes], ...] = (),
	) -> bytes:
		values = np.asarray(samples, dtype=np.float64).reshape(-1)
		if float32:
			data, tag, bits = values.astype("<f4").tobytes(), 0x0003, 32
		else:
			data = np.clip(np.round(values * 32768.0), -32768, 32767).astype("<i2").tobytes()
			tag, bits = 0x0001, 16
		fmt = fmt_body(0xFFFE, channels, rate, bits, tag) if extensible else fmt_body(tag, channels, rate, bits)
		body = b"WAVE" + chunk(b"fmt ", fmt)
		for chunk_id, payload in extra_chunks:
			body += chunk(chunk_id, payload)
		body += chunk(b"data", data)
		return b"RIFF" + struct.pack("<I", len(body)) + body

	_build.chunk = chunk
	_build.fmt_body = fmt_body
	return _build


def make_entries(
	speakers=("a", "b"),
	emotions=(Emotion.NEUTRAL, Emotion.ANGRY),
	utterances=("u1", "u2", "u3"),
	reps=(1, 2),
) -> tuple[ManifestEntry, ...]:
	return tuple(
		ManifestEntry(f"{s}/{e.value}/{u}_{r}.wav", s, e, u, r)
		for s in speakers
		for e in emotions
		for u in utterances
		for r in reps
	)


@pytest.fixture
def tiny_manifest() -> CorpusManifest:
	return CorpusManifest(make_entries(), CorpusKind.GENERIC)


@pytest.fixture(scope="session")
def micro_features() -> FeatureConfig:
	return FeatureConfig(target_frames=MICRO_FRAMES)


@pytest.fixture(scope="session")
def synthetic_corpus():
	"""2 speakers x 4 utterances x 4 repetitions x (neutral, angry)."""
	return generate_synthetic_corpus(2, 4, 4, 7, (Emotion.NEUTRAL, Emotion.ANGRY))


@pytest.fixture(scope="session")
def synthetic_archive(synthetic_corpus, micro_features):
	manifest, clips = synthetic_corpus
	archive, skipped = extract_archive(manifest, micro_features, clips=clips)
	assert skipped == []
	return archive


def micro_capsule_config(**overrides) -> ModelConfig:
	values = dict(
		architecture="capsnet_m",
		n_classes=2,
		n_features=40,
		target_frames=MICRO_FRAMES,
		layers=MICRO_CAPSULE_LAYERS,
		primary_dim=8,
		digit_dim=4,
		decoder_hidden=8,
		seed=3,
	)
	values.update(overrides)
	return ModelConfig(**values)


def micro_cnn_config(**overrides) -> ModelConfig:
	values = dict(
		architecture="baseline_cnn",
		n_classes=2,
		n_features=40,
		target_frames=32,
		layers=MICRO_CNN_LAYERS,
		seed=3,
	)
	values.update(overrides)
	return ModelConfig(**values)


@pytest.fixture(scope="session")
def capsule_config():
	return micro_capsule_config


@pytest.fixture(scope="session")
def cnn_config():
	return micro_cnn_config
