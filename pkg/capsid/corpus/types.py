"""
Corpus data types: clips, manifests and split plans.

All types are immutable after construction; sample arrays are marked
read-only so clips can be handed across worker threads.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from capsid.core.errors import ContractError, ManifestError


class Emotion(str, Enum):
	NEUTRAL = "neutral"
	HAPPY = "happy"
	SAD = "sad"
	ANGRY = "angry"
	FEAR = "fear"
	DISGUST = "disgust"
	LOUD = "loud"
	SOFT = "soft"
	SLOW = "slow"
	FAST = "fast"
	CALM = "calm"
	SURPRISE = "surprise"

	@classmethod
	def parse(cls, value: str | "Emotion") -> "Emotion":
		if isinstance(value, Emotion):
			return value
		text = str(value).strip().lower()
		aliases = {"anger": "angry", "fearful": "fear", "surprised": "surprise"}
		try:
			return cls(aliases.get(text, text))
		except ValueError as exc:
			raise ManifestError(f"unknown emotion {value!r}") from exc


# Emotions studied on the acted corpora; the stress corpus uses its own styles.
ACTED_EMOTIONS = (Emotion.NEUTRAL, Emotion.HAPPY, Emotion.SAD, Emotion.ANGRY, Emotion.FEAR, Emotion.DISGUST)
STRESS_EMOTIONS = (Emotion.NEUTRAL, Emotion.ANGRY, Emotion.LOUD, Emotion.SOFT, Emotion.SLOW, Emotion.FAST)


class CorpusKind(str, Enum):
	RAVDESS = "ravdess"
	SUSAS_WORDS = "susas_words"
	GENERIC = "generic"
	SYNTHETIC = "synthetic"


class SplitProtocol(str, Enum):
	ESD_STYLE = "esd_style"
	RAVDESS_STYLE = "ravdess_style"
	SUSAS_STYLE = "susas_style"


@dataclass(frozen=True)
class AudioClip:
	"""
	Mono waveform plus corpus labels.

	Labels stay empty until a manifest adapter fills them (see with_labels).
	"""
	samples: np.ndarray
	sample_rate_hz: int
	speaker_id: str = ""
	emotion: Emotion | None = None
	utterance_id: str = ""
	repetition: int = 0

	def __post_init__(self):
		samples = np.array(self.samples, dtype=np.float64).reshape(-1)
		if samples.size == 0:
			raise ContractError("clip has no samples")
		if not np.all(np.isfinite(samples)):
			raise ContractError("clip contains non-finite samples")
		if np.max(np.abs(samples)) > 1.0:
			raise ContractError("clip samples outside [-1, 1]")
		if int(self.sample_rate_hz) <= 0:
			raise ContractError(f"sample rate must be positive, got {self.sample_rate_hz}")
		samples.setflags(write=False)
		object.__setattr__(self, "samples", samples)
		object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))
		if self.emotion is not None:
			object.__setattr__(self, "emotion", Emotion.parse(self.emotion))

	@property
	def duration_s(self) -> float:
		return self.samples.size / self.sample_rate_hz

	def with_samples(self, samples: np.ndarray, sample_rate_hz: int | None = None) -> "AudioClip":
		return AudioClip(
			samples,
			self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz,
			self.speaker_id,
			self.emotion,
			self.utterance_id,
			self.repetition,
		)

	def with_labels(self, entry: "ManifestEntry") -> "AudioClip":
		return AudioClip(
			self.samples,
			self.sample_rate_hz,
			entry.speaker_id,
			entry.emotion,
			entry.utterance_id,
			entry.repetition,
		)


@dataclass(frozen=True)
class ManifestEntry:
	path: str
	speaker_id: str
	emotion: Emotion
	utterance_id: str
	repetition: int

	@property
	def key(self) -> tuple[str, Emotion, str, int]:
		return (self.speaker_id, self.emotion, self.utterance_id, self.repetition)


@dataclass(frozen=True)
class CorpusManifest:
	entries: tuple[ManifestEntry, ...]
	corpus_kind: CorpusKind = CorpusKind.GENERIC

	def __post_init__(self):
		entries = tuple(self.entries)
		object.__setattr__(self, "entries", entries)
		object.__setattr__(self, "corpus_kind", CorpusKind(self.corpus_kind))
		duplicates = [key for key, count in Counter(entry.key for entry in entries).items() if count > 1]
		if duplicates:
			raise ManifestError(f"duplicate (speaker, emotion, utterance, repetition) entries: {duplicates[:3]}")
		if len(self.speakers) < 2:
			raise ManifestError("manifest needs at least 2 distinct speakers")
		if len(self.utterances) < 2:
			raise ManifestError("manifest needs at least 2 distinct utterance ids")

	def __len__(self) -> int:
		return len(self.entries)

	def __getitem__(self, index: int) -> ManifestEntry:
		return self.entries[index]

	@property
	def speakers(self) -> list[str]:
		return sorted({entry.speaker_id for entry in self.entries})

	@property
	def utterances(self) -> list[str]:
		return sorted({entry.utterance_id for entry in self.entries})

	@property
	def emotions(self) -> list[Emotion]:
		present = {entry.emotion for entry in self.entries}
		return [emotion for emotion in Emotion if emotion in present]

	def speaker_index(self) -> dict[str, int]:
		"""Class index per speaker, in sorted speaker order."""
		return {speaker: i for i, speaker in enumerate(self.speakers)}

	def subset(self, speakers: Iterable[str]) -> tuple["CorpusManifest", list[int]]:
		"""
		Restrict the manifest to some speakers.

		Returns:
			(sub_manifest, original_indices) so callers can map back.
		"""
		wanted = set(speakers)
		kept = [i for i, entry in enumerate(self.entries) if entry.speaker_id in wanted]
		return CorpusManifest(tuple(self.entries[i] for i in kept), self.corpus_kind), kept


@dataclass(frozen=True)
class SplitPlan:
	trial_index: int
	train_items: tuple[int, ...]
	test_items: tuple[int, ...]
	protocol: SplitProtocol
	seed: int
	train_utterances: tuple[str, ...] = field(default=())

	def to_json_dict(self) -> dict:
		return {
			"trial": self.trial_index,
			"seed": self.seed,
			"protocol": self.protocol.value,
			"train": list(self.train_items),
			"test": list(self.test_items),
			"train_utterances": list(self.train_utterances),
		}

	@classmethod
	def from_json_dict(cls, payload: dict) -> "SplitPlan":
		return cls(
			trial_index=int(payload["trial"]),
			train_items=tuple(int(i) for i in payload["train"]),
			test_items=tuple(int(i) for i in payload["test"]),
			protocol=SplitProtocol(payload["protocol"]),
			seed=int(payload["seed"]),
			train_utterances=tuple(payload.get("train_utterances", ())),
		)


def check_split(manifest: CorpusManifest, plan: SplitPlan) -> list[str]:
	"""
	List every violated split invariant (empty when the plan is sound).

	This is a pure function for easy testing - no side effects.
	"""
	problems: list[str] = []
	train = set(plan.train_items)
	test = set(plan.test_items)
	if train & test:
		problems.append(f"{len(train & test)} items in both train and test")
	non_neutral = [i for i in plan.train_items if manifest[i].emotion is not Emotion.NEUTRAL]
	if non_neutral:
		problems.append(f"{len(non_neutral)} non-neutral train items (first: {non_neutral[0]})")
	train_utts = {manifest[i].utterance_id for i in plan.train_items}
	test_utts = {manifest[i].utterance_id for i in plan.test_items}
	shared = train_utts & test_utts
	if shared:
		problems.append(f"utterances shared by train and test: {sorted(shared)}")
	return problems


def labels_for(manifest: CorpusManifest, indices: Sequence[int]) -> np.ndarray:
	"""Speaker class indices for the given manifest items."""
	lookup = manifest.speaker_index()
	return np.array([lookup[manifest[i].speaker_id] for i in indices], dtype=np.int64)
