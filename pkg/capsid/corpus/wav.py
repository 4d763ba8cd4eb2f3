"""
RIFF/WAVE reading and writing.

Accepts PCM 16-bit and IEEE-float 32-bit, mono or stereo (stereo is averaged
to mono). Parsing walks the chunk list explicitly so malformed files fail with
an error naming the offending chunk.
"""
from __future__ import annotations

from enum import IntEnum
from pathlib import Path
import struct

import numpy as np

from capsid.core.errors import UnsupportedFormatError, WavParseError
from capsid.corpus.types import AudioClip


class WaveFormat(IntEnum):
	PCM = 0x0001
	IEEE_FLOAT = 0x0003
	EXTENSIBLE = 0xFFFE


def _iter_chunks(payload: bytes, start: int):
	offset = start
	while offset + 8 <= len(payload):
		chunk_id = payload[offset:offset + 4].decode("latin-1")
		(size,) = struct.unpack_from("<I", payload, offset + 4)
		body_start = offset + 8
		body_end = body_start + size
		if body_end > len(payload):
			raise WavParseError(chunk_id, f"declares {size} bytes but only {len(payload) - body_start} remain")
		yield chunk_id, payload[body_start:body_end]
		# chunks are word aligned
		offset = body_end + (size & 1)


def _parse_fmt(body: bytes) -> tuple[int, int, int, int]:
	if len(body) < 16:
		raise WavParseError("fmt ", f"chunk too small ({len(body)} bytes)")
	tag, channels, rate, _byte_rate, _align, bits = struct.unpack_from("<HHIIHH", body, 0)
	if tag == WaveFormat.EXTENSIBLE:
		if len(body) < 26:
			raise WavParseError("fmt ", "extensible format without sub-format GUID")
		(tag,) = struct.unpack_from("<H", body, 24)
	if channels < 1:
		raise WavParseError("fmt ", "zero channels")
	if rate <= 0:
		raise WavParseError("fmt ", "zero sample rate")
	return tag, channels, rate, bits


def decode_wav_bytes(payload: bytes) -> AudioClip:
	"""
	Decode a complete WAV file image.

	This is a pure function for easy testing - no side effects.
	"""
	if len(payload) < 12:
		raise WavParseError("RIFF", "file shorter than the RIFF header")
	if payload[0:4] != b"RIFF":
		raise WavParseError("RIFF", f"bad magic {payload[0:4]!r}")
	if payload[8:12] != b"WAVE":
		raise WavParseError("WAVE", f"bad form type {payload[8:12]!r}")

	fmt: tuple[int, int, int, int] | None = None
	data: bytes | None = None
	for chunk_id, body in _iter_chunks(payload, 12):
		if chunk_id == "fmt ":
			fmt = _parse_fmt(body)
		elif chunk_id == "data":
			data = body
	if fmt is None:
		raise WavParseError("fmt ", "missing format chunk")
	if data is None:
		raise WavParseError("data", "missing data chunk")

	tag, channels, rate, bits = fmt
	if tag == WaveFormat.PCM and bits == 16:
		samples = np.frombuffer(data[: len(data) - len(data) % 2], dtype="<i2").astype(np.float64) / 32768.0
	elif tag == WaveFormat.IEEE_FLOAT and bits == 32:
		samples = np.frombuffer(data[: len(data) - len(data) % 4], dtype="<f4").astype(np.float64)
	else:
		raise UnsupportedFormatError(f"format tag {tag:#06x} with {bits} bits per sample")

	frames = samples.size // channels
	if frames == 0:
		raise WavParseError("data", "no complete sample frames")
	samples = samples[: frames * channels].reshape(frames, channels)
	mono = samples.mean(axis=1) if channels > 1 else samples[:, 0]
	mono = np.nan_to_num(mono, nan=0.0, posinf=1.0, neginf=-1.0)
	return AudioClip(np.clip(mono, -1.0, 1.0), rate)


def load_wav(path: str | Path) -> AudioClip:
	"""
	Load a WAV file into an unlabelled AudioClip.

	Args:
		path: File path.

	Returns:
		AudioClip with samples in [-1, 1] and the header's sample rate.
	"""
	try:
		payload = Path(path).read_bytes()
	except OSError as exc:
		raise WavParseError("RIFF", f"cannot read {path}: {exc}") from exc
	return decode_wav_bytes(payload)


def encode_wav_bytes(samples: np.ndarray, sample_rate_hz: int) -> bytes:
	"""Encode mono samples in [-1, 1] as a PCM16 WAV image."""
	pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
	data = pcm.tobytes()
	fmt = struct.pack("<HHIIHH", WaveFormat.PCM, 1, int(sample_rate_hz), int(sample_rate_hz) * 2, 2, 16)
	body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
	return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path: str | Path, clip: AudioClip) -> None:
	target = Path(path)
	target.parent.mkdir(parents=True, exist_ok=True)
	target.write_bytes(encode_wav_bytes(clip.samples, clip.sample_rate_hz))
