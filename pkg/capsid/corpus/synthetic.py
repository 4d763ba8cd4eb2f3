"""
Synthetic desk-scale corpus.

Each speaker is a glottal pitch plus three formant-like resonances; each
utterance is a distinct pitch-sweep and syllable pattern; each emotion scales
pitch and reshapes the amplitude envelope. The task is separable enough to
exercise training and evaluation without licensed recordings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capsid.core.errors import ContractError
from capsid.core.seeding import derive_seed, rng
from capsid.corpus.types import ACTED_EMOTIONS, AudioClip, CorpusKind, CorpusManifest, Emotion, ManifestEntry

SAMPLE_RATE_HZ = 16000
MAX_HARMONIC_HZ = 4000.0
BASE_FORMANTS_HZ = (500.0, 1500.0, 2500.0)
FORMANT_BANDWIDTH_HZ = (90.0, 120.0, 160.0)


@dataclass(frozen=True)
class EmotionStyle:
	pitch_scale: float
	gain: float
	tremor_hz: float
	attack: float


# pitch scale, loudness, pitch tremor and envelope sharpness per emotion
EMOTION_STYLES = {
	Emotion.NEUTRAL: EmotionStyle(1.00, 1.00, 0.0, 1.0),
	Emotion.HAPPY: EmotionStyle(1.15, 1.10, 5.0, 1.5),
	Emotion.SAD: EmotionStyle(0.90, 0.70, 0.0, 0.6),
	Emotion.ANGRY: EmotionStyle(1.20, 1.30, 3.0, 2.5),
	Emotion.FEAR: EmotionStyle(1.25, 0.85, 8.0, 1.2),
	Emotion.DISGUST: EmotionStyle(0.95, 0.90, 2.0, 0.8),
}


@dataclass(frozen=True)
class SpeakerVoice:
	f0_hz: float
	formants_hz: tuple[float, float, float]


@dataclass(frozen=True)
class UtterancePattern:
	duration_s: float
	sweep_depth: float
	sweep_rate_hz: float
	sweep_phase: float
	syllables: int


def _speaker_voices(n_speakers: int, seed: int) -> list[SpeakerVoice]:
	# spread pitch and vocal-tract scale over a grid so no two speakers coincide
	gen = rng(derive_seed(seed, "synth", 0))
	pitch_order = gen.permutation(n_speakers)
	tract_order = gen.permutation(n_speakers)
	span = max(1, n_speakers - 1)
	voices = []
	for s in range(n_speakers):
		jitter = rng(derive_seed(seed, "synth-speaker", s))
		f0 = 95.0 + 140.0 * pitch_order[s] / span + jitter.uniform(-3.0, 3.0)
		scale = 0.82 + 0.36 * tract_order[s] / span
		formants = tuple(float(f * scale * (1.0 + jitter.uniform(-0.03, 0.03))) for f in BASE_FORMANTS_HZ)
		voices.append(SpeakerVoice(float(f0), formants))
	return voices


def _utterance_patterns(n_utterances: int, seed: int) -> list[UtterancePattern]:
	patterns = []
	for u in range(n_utterances):
		gen = rng(derive_seed(seed, "synth-utterance", u))
		patterns.append(
			UtterancePattern(
				duration_s=float(1.0 + 1.6 * gen.random()),
				sweep_depth=float(gen.uniform(0.05, 0.25)),
				sweep_rate_hz=float(gen.uniform(0.5, 3.0)),
				sweep_phase=float(gen.uniform(0.0, 2 * np.pi)),
				syllables=int(gen.integers(2, 7)),
			)
		)
	return patterns


def _resonance_gain(freqs: np.ndarray, formants: tuple[float, float, float]) -> np.ndarray:
	gain = np.zeros_like(freqs)
	for centre, bandwidth in zip(formants, FORMANT_BANDWIDTH_HZ):
		gain += 1.0 / (1.0 + ((freqs - centre) / bandwidth) ** 2)
	return gain


def synthesize_clip(
	voice: SpeakerVoice,
	pattern: UtterancePattern,
	emotion: Emotion,
	repetition_seed: int,
	sample_rate_hz: int = SAMPLE_RATE_HZ,
) -> np.ndarray:
	"""Render one clip; deterministic in its arguments."""
	style = EMOTION_STYLES[emotion]
	gen = rng(repetition_seed)
	n = int(round(pattern.duration_s * sample_rate_hz))
	t = np.arange(n) / sample_rate_hz

	f0 = voice.f0_hz * style.pitch_scale * (1.0 + gen.uniform(-0.02, 0.02))
	contour = 1.0 + pattern.sweep_depth * np.sin(2 * np.pi * pattern.sweep_rate_hz * t / pattern.duration_s + pattern.sweep_phase)
	if style.tremor_hz:
		contour = contour * (1.0 + 0.02 * np.sin(2 * np.pi * style.tremor_hz * t))
	inst_f0 = f0 * contour
	phase = 2 * np.pi * np.cumsum(inst_f0) / sample_rate_hz

	n_harmonics = max(1, int(MAX_HARMONIC_HZ // (f0 * (1.0 + pattern.sweep_depth))))
	signal = np.zeros(n)
	weight_total = 0.0
	for k in range(1, n_harmonics + 1):
		weights = _resonance_gain(k * inst_f0, voice.formants_hz) / k ** 0.5
		signal += weights * np.sin(k * phase)
		weight_total += float(np.max(weights))
	signal /= max(weight_total, 1e-12)

	syllable = np.abs(np.sin(np.pi * pattern.syllables * t / pattern.duration_s)) ** (1.0 / style.attack)
	envelope = 0.5 * style.gain * (0.15 + 0.85 * syllable)
	breath = 0.003 * gen.standard_normal(n)
	return np.clip(signal * envelope + breath, -1.0, 1.0)


def generate_synthetic_corpus(
	n_speakers: int,
	n_utterances: int,
	n_reps: int,
	seed: int,
	emotions: tuple[Emotion, ...] = ACTED_EMOTIONS,
) -> tuple[CorpusManifest, list[AudioClip]]:
	"""
	Generate a labelled in-memory corpus.

	Returns:
		(manifest, clips) with clips aligned to manifest entries. Paths are
		relative (``<speaker>/<emotion>/<utterance>_<rep>.wav``) so the corpus
		can be written under any directory.
	"""
	if n_speakers < 2 or n_utterances < 2:
		raise ContractError("synthetic corpus needs at least 2 speakers and 2 utterances")
	if n_reps < 1:
		raise ContractError("synthetic corpus needs at least 1 repetition")
	unknown = [emotion.value for emotion in emotions if emotion not in EMOTION_STYLES]
	if unknown:
		raise ContractError(f"no synthetic style for emotions {unknown}")
	voices = _speaker_voices(n_speakers, seed)
	patterns = _utterance_patterns(n_utterances, seed)
	entries: list[ManifestEntry] = []
	clips: list[AudioClip] = []
	for s, voice in enumerate(voices):
		speaker = f"spk{s:02d}"
		for emotion in emotions:
			for u, pattern in enumerate(patterns):
				utterance = f"utt{u:02d}"
				for rep in range(n_reps):
					rep_seed = derive_seed(seed, "synth-clip", s, u, rep, list(Emotion).index(emotion))
					samples = synthesize_clip(voice, pattern, emotion, rep_seed)
					entry = ManifestEntry(f"{speaker}/{emotion.value}/{utterance}_{rep}.wav", speaker, emotion, utterance, rep)
					entries.append(entry)
					clips.append(AudioClip(samples, SAMPLE_RATE_HZ, speaker, emotion, utterance, rep))
	return CorpusManifest(tuple(entries), CorpusKind.SYNTHETIC), clips
