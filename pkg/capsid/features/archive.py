"""
Feature archive: one binary file of CAPF records plus a sidecar CSV.

Record layout (little-endian):
    magic "CAPF" | version u32 | rows u32 | cols u32 | n_valid u32 | rows*cols float32 (row-major)

The sidecar maps record index -> manifest index and labels, so an archive
built with skipped files still lines up with its manifest.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
from pathlib import Path
import struct
from typing import Callable, Sequence

import numpy as np

from capsid.core.errors import ContractError, ManifestError
from capsid.core.runner import TaskRunner, get_default_runner, raise_first_failure
from capsid.corpus.types import AudioClip, CorpusManifest, Emotion, ManifestEntry
from capsid.corpus.wav import load_wav
from capsid.features.mfcc import FeatureConfig, FeatureMatrix, extract_features, standardize

logger = logging.getLogger(__name__)

MAGIC = b"CAPF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
SIDECAR_HEADER = "record,manifest_index,path,speaker,emotion,utterance,repetition"


@dataclass(frozen=True)
class FeatureArchive:
	"""Feature matrices keyed by manifest index."""

	manifest_indices: tuple[int, ...]
	matrices: tuple[FeatureMatrix, ...]
	entries: tuple[ManifestEntry, ...]

	def __post_init__(self):
		if not len(self.manifest_indices) == len(self.matrices) == len(self.entries):
			raise ContractError("archive columns have different lengths")
		object.__setattr__(self, "_lookup", {m: r for r, m in enumerate(self.manifest_indices)})

	def __len__(self) -> int:
		return len(self.matrices)

	def __contains__(self, manifest_index: int) -> bool:
		return manifest_index in self._lookup

	def get(self, manifest_index: int) -> FeatureMatrix:
		try:
			return self.matrices[self._lookup[manifest_index]]
		except KeyError as exc:
			raise ContractError(f"manifest item {manifest_index} has no features in the archive") from exc

	def select(self, manifest_indices: Sequence[int]) -> FeatureArchive:
		"""Sub-archive for the given items, re-keyed 0..n-1 in the given order."""
		records = [self._lookup[i] for i in manifest_indices]
		return FeatureArchive(
			tuple(range(len(records))),
			tuple(self.matrices[r] for r in records),
			tuple(self.entries[r] for r in records),
		)

	def stack(self, manifest_indices: Sequence[int], stats: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
		"""Batch [N x 1 x rows x cols] for the given manifest items, z-scored when ``stats`` is given."""
		matrices = [self.get(i) for i in manifest_indices]
		if stats is None:
			return np.stack([m.values for m in matrices])[:, None, :, :]
		return np.stack([standardize(m.values, m.n_valid_frames, stats) for m in matrices])[:, None, :, :]


class ReadRecorder:
	"""Archive view that remembers every manifest index it served."""

	def __init__(self, archive: FeatureArchive):
		self.archive = archive
		self.read: set[int] = set()

	def get(self, manifest_index: int) -> FeatureMatrix:
		self.read.add(manifest_index)
		return self.archive.get(manifest_index)

	def stack(self, manifest_indices: Sequence[int], stats: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
		self.read.update(manifest_indices)
		return self.archive.stack(manifest_indices, stats)


def encode_record(matrix: FeatureMatrix) -> bytes:
	rows, cols = matrix.shape
	header = _HEADER.pack(MAGIC, VERSION, rows, cols, matrix.n_valid_frames)
	return header + matrix.values.astype("<f4").tobytes(order="C")


def decode_records(payload: bytes) -> list[FeatureMatrix]:
	"""
	Decode concatenated CAPF records.

	This is a pure function for easy testing - no side effects.
	"""
	matrices: list[FeatureMatrix] = []
	offset = 0
	while offset < len(payload):
		if offset + _HEADER.size > len(payload):
			raise ContractError(f"truncated record header at byte {offset}")
		magic, version, rows, cols, n_valid = _HEADER.unpack_from(payload, offset)
		if magic != MAGIC:
			raise ContractError(f"bad record magic {magic!r} at byte {offset}")
		if version != VERSION:
			raise ContractError(f"unsupported archive version {version}")
		offset += _HEADER.size
		size = rows * cols * 4
		if offset + size > len(payload):
			raise ContractError(f"truncated record body at byte {offset}")
		values = np.frombuffer(payload, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
		matrices.append(FeatureMatrix(values.astype(np.float64), int(n_valid)))
		offset += size
	return matrices


def save_archive(path: str | Path, archive: FeatureArchive) -> Path:
	"""Write ``<path>`` and ``<path>.csv``; returns the sidecar path."""
	target = Path(path)
	target.parent.mkdir(parents=True, exist_ok=True)
	target.write_bytes(b"".join(encode_record(m) for m in archive.matrices))
	sidecar = target.with_suffix(target.suffix + ".csv")
	lines = [SIDECAR_HEADER]
	for record, (index, entry) in enumerate(zip(archive.manifest_indices, archive.entries)):
		lines.append(
			f"{record},{index},{entry.path},{entry.speaker_id},{entry.emotion.value},{entry.utterance_id},{entry.repetition}"
		)
	sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")
	return sidecar


def load_archive(path: str | Path) -> FeatureArchive:
	target = Path(path)
	matrices = decode_records(target.read_bytes())
	sidecar = target.with_suffix(target.suffix + ".csv")
	rows = [line for line in sidecar.read_text(encoding="utf-8").splitlines() if line.strip()]
	if not rows or rows[0] != SIDECAR_HEADER:
		raise ManifestError(f"{sidecar}: missing or wrong header")
	indices: list[int] = []
	entries: list[ManifestEntry] = []
	for line in rows[1:]:
		_record, index, path_text, speaker, emotion, utterance, repetition = line.split(",")
		indices.append(int(index))
		entries.append(ManifestEntry(path_text, speaker, Emotion.parse(emotion), utterance, int(repetition)))
	if len(entries) != len(matrices):
		raise ManifestError(f"{sidecar}: {len(entries)} rows for {len(matrices)} records")
	return FeatureArchive(tuple(indices), tuple(matrices), tuple(entries))


def extract_archive(
	manifest: CorpusManifest,
	cfg: FeatureConfig,
	*,
	clips: Sequence[AudioClip] | None = None,
	loader: Callable[[str], AudioClip] = load_wav,
	runner: TaskRunner | None = None,
	skip_errors: bool = False,
	items: Sequence[int] | None = None,
	source: Callable[[int], AudioClip] | None = None,
) -> tuple[FeatureArchive, list[tuple[int, str]]]:
	"""
	Extract features for every manifest entry, preserving manifest order.

	Args:
		manifest: Entries to process.
		cfg: Feature configuration.
		clips: In-memory clips aligned with the manifest (skips file loading).
		loader: Path -> AudioClip, injectable for tests.
		runner: TaskRunner for per-clip parallelism.
		skip_errors: Drop failing entries instead of aborting.
		items: Manifest indices to process (default: all of them).
		source: manifest_index -> clip, used instead of ``clips`` and ``loader``.

	Returns:
		(archive, skipped) where skipped lists (manifest_index, error text).
	"""
	runner = runner or get_default_runner()
	if clips is not None and len(clips) != len(manifest):
		raise ContractError(f"{len(clips)} clips for {len(manifest)} manifest entries")

	def _one(index: int) -> FeatureMatrix:
		entry = manifest[index]
		if source is not None:
			clip = source(index)
		else:
			clip = clips[index] if clips is not None else loader(entry.path)
		matrix = extract_features(clip.with_labels(entry), cfg)
		# archives store float32; round now so in-memory and reloaded archives agree
		return FeatureMatrix(matrix.values.astype(np.float32).astype(np.float64), matrix.n_valid_frames)

	wanted = list(range(len(manifest))) if items is None else list(items)
	results = runner.map(_one, wanted)
	indices: list[int] = []
	matrices: list[FeatureMatrix] = []
	skipped: list[tuple[int, str]] = []
	for result in results:
		index = wanted[result.index]
		if result.ok:
			indices.append(index)
			matrices.append(result.value)
			continue
		if not skip_errors:
			raise_first_failure([result])
		logger.warning("skipping %s: %s", manifest[index].path, result.error)
		skipped.append((index, result.error or "unknown error"))
	logger.info("extracted %d feature matrices (%d skipped)", len(matrices), len(skipped))
	archive = FeatureArchive(tuple(indices), tuple(matrices), tuple(manifest[i] for i in indices))
	return archive, skipped
