"""
Manifest adapters for the supported corpus layouts.

This module provides functions to:
- Parse RAVDESS 7-field file names and scan an actor tree
- Parse SUSAS-style ``<speaker>/<condition>/<word><rep>.wav`` paths
- Read and write the generic CSV manifest

Name/path parsers are pure functions; scanners only touch the filesystem
to list files.
"""
from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
import re
from typing import NamedTuple, Sequence

from capsid.core.errors import ManifestError
from capsid.corpus.types import ACTED_EMOTIONS, CorpusKind, CorpusManifest, Emotion, ManifestEntry

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ("path", "speaker", "emotion", "utterance", "repetition")

RAVDESS_EMOTIONS = {
	"01": Emotion.NEUTRAL,
	"02": Emotion.CALM,
	"03": Emotion.HAPPY,
	"04": Emotion.SAD,
	"05": Emotion.ANGRY,
	"06": Emotion.FEAR,
	"07": Emotion.DISGUST,
	"08": Emotion.SURPRISE,
}
RAVDESS_SPEECH = "01"
RAVDESS_SONG = "02"

SUSAS_CONDITIONS = {
	"neutral": Emotion.NEUTRAL,
	"angry": Emotion.ANGRY,
	"loud": Emotion.LOUD,
	"soft": Emotion.SOFT,
	"slow": Emotion.SLOW,
	"fast": Emotion.FAST,
}


class RavdessName(NamedTuple):
	speaker_id: str
	emotion: Emotion
	utterance_id: str
	repetition: int
	vocal_channel: str
	skip: bool


def parse_ravdess_name(filename: str) -> RavdessName:
	"""
	Parse a RAVDESS file name ``MM-VC-EE-II-SS-RR-AA.wav``.

	This is a pure function for easy testing - no side effects.

	Returns:
		RavdessName; ``skip`` is True for emotions outside the six studied
		ones (calm, surprise).
	"""
	stem = Path(filename).name
	if stem.lower().endswith(".wav"):
		stem = stem[:-4]
	parts = stem.split("-")
	if len(parts) != 7 or not all(re.fullmatch(r"\d{2}", part) for part in parts):
		raise ManifestError(f"{filename!r}: expected 7 hyphen-separated 2-digit fields")
	_modality, vocal, emotion_code, _intensity, statement, repetition, actor = parts
	emotion = RAVDESS_EMOTIONS.get(emotion_code)
	if emotion is None:
		raise ManifestError(f"{filename!r}: unknown emotion code {emotion_code}")
	return RavdessName(
		speaker_id=actor,
		emotion=emotion,
		utterance_id=statement,
		repetition=int(repetition),
		vocal_channel=vocal,
		skip=emotion not in ACTED_EMOTIONS,
	)


def scan_ravdess(root: str | Path, include_song: bool = False) -> CorpusManifest:
	"""
	Build a manifest from a RAVDESS tree (any depth below ``root``).

	Song files are included only when ``include_song`` is set. Intensity is
	not a manifest field, so each song/intensity variant is folded into the
	repetition number to keep entries unique.
	"""
	entries: list[ManifestEntry] = []
	for wav in sorted(Path(root).rglob("*.wav")):
		try:
			name = parse_ravdess_name(wav.name)
		except ManifestError as exc:
			logger.warning("skipping %s: %s", wav, exc)
			continue
		if name.skip:
			continue
		if name.vocal_channel == RAVDESS_SONG and not include_song:
			continue
		intensity = int(wav.stem.split("-")[3])
		repetition = name.repetition + 10 * (intensity - 1) + (100 if name.vocal_channel == RAVDESS_SONG else 0)
		entries.append(ManifestEntry(str(wav), name.speaker_id, name.emotion, name.utterance_id, repetition))
	logger.info("scanned RAVDESS: %d entries", len(entries))
	return CorpusManifest(tuple(entries), CorpusKind.RAVDESS)


def parse_susas_path(path: str | Path) -> tuple[str, Emotion, str, int] | None:
	"""
	Parse ``.../<speaker>/<condition>/<word><rep>.wav``.

	This is a pure function for easy testing - no side effects.

	Returns:
		(speaker, emotion, word, repetition), or None for unstudied styles.
	"""
	p = Path(path)
	if len(p.parts) < 3:
		raise ManifestError(f"{path}: expected <speaker>/<condition>/<word><rep>.wav")
	condition = p.parent.name.lower()
	speaker = p.parent.parent.name
	emotion = SUSAS_CONDITIONS.get(condition)
	if emotion is None:
		return None
	match = re.fullmatch(r"([a-zA-Z_]+?)(\d+)", p.stem)
	if match is None:
		raise ManifestError(f"{path}: file stem must be <word><repetition>")
	return speaker, emotion, match.group(1).lower(), int(match.group(2))


def scan_susas(root: str | Path) -> CorpusManifest:
	entries: list[ManifestEntry] = []
	for wav in sorted(Path(root).rglob("*.wav")):
		parsed = parse_susas_path(wav.relative_to(root))
		if parsed is None:
			continue
		speaker, emotion, word, rep = parsed
		entries.append(ManifestEntry(str(wav), speaker, emotion, word, rep))
	logger.info("scanned SUSAS-style tree: %d entries", len(entries))
	return CorpusManifest(tuple(entries), CorpusKind.SUSAS_WORDS)


def parse_manifest_csv(text: str, base_dir: str | Path | None = None, kind: CorpusKind = CorpusKind.GENERIC) -> CorpusManifest:
	"""
	Parse the generic ``path,speaker,emotion,utterance,repetition`` CSV.

	Relative paths are resolved against ``base_dir`` when given.
	"""
	lines = [line for line in text.splitlines() if line.strip()]
	if not lines:
		raise ManifestError("empty manifest")
	header = tuple(col.strip() for col in lines[0].split(","))
	if header != MANIFEST_HEADER:
		raise ManifestError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {lines[0]!r}")
	entries: list[ManifestEntry] = []
	for lineno, line in enumerate(lines[1:], start=2):
		fields = [col.strip() for col in line.split(",")]
		if len(fields) != len(MANIFEST_HEADER):
			raise ManifestError(f"line {lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(fields)}")
		path, speaker, emotion, utterance, repetition = fields
		if base_dir is not None and not Path(path).is_absolute():
			path = str(Path(base_dir) / path)
		try:
			rep = int(repetition)
		except ValueError as exc:
			raise ManifestError(f"line {lineno}: repetition {repetition!r} is not an integer") from exc
		entries.append(ManifestEntry(path, speaker, Emotion.parse(emotion), utterance, rep))
	return CorpusManifest(tuple(entries), kind)


def load_manifest_csv(path: str | Path, kind: CorpusKind = CorpusKind.GENERIC) -> CorpusManifest:
	manifest_path = Path(path)
	try:
		text = manifest_path.read_text(encoding="utf-8")
	except OSError as exc:
		raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
	return parse_manifest_csv(text, base_dir=manifest_path.parent, kind=kind)


def format_manifest_csv(entries: Sequence[ManifestEntry], base_dir: str | Path | None = None) -> str:
	buffer = io.StringIO()
	writer = csv.writer(buffer, lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar=None)
	writer.writerow(MANIFEST_HEADER)
	for entry in entries:
		path = entry.path
		if base_dir is not None:
			try:
				path = str(Path(path).relative_to(base_dir))
			except ValueError:
				pass
		if "," in path or "," in entry.speaker_id or "," in entry.utterance_id:
			raise ManifestError(f"manifest fields may not contain commas: {entry}")
		writer.writerow((path, entry.speaker_id, entry.emotion.value, entry.utterance_id, entry.repetition))
	return buffer.getvalue()


def write_manifest_csv(path: str | Path, manifest: CorpusManifest) -> None:
	target = Path(path)
	target.parent.mkdir(parents=True, exist_ok=True)
	target.write_text(format_manifest_csv(manifest.entries, base_dir=target.parent), encoding="utf-8")
