"""
Waveform-level operations: polyphase resampling and additive noise.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import signal as sps

from capsid.core.errors import ContractError, DegenerateSignalError
from capsid.core.seeding import rng
from capsid.corpus.types import AudioClip

# taps per polyphase branch of the anti-aliasing filter
TAPS_PER_PHASE = 64
KAISER_BETA = 8.0


def rms(samples: np.ndarray) -> float:
	samples = np.asarray(samples, dtype=np.float64)
	return float(np.sqrt(np.mean(samples * samples)))


def design_resampling_filter(up: int, down: int) -> np.ndarray:
	"""
	Kaiser-windowed sinc low-pass for an up/down polyphase resampler.

	The cutoff sits at min(source, target) Nyquist. Each polyphase branch is
	normalised to unit DC gain (after the resampler's gain of ``up``) so a
	constant input stays exactly constant.
	"""
	max_rate = max(up, down)
	numtaps = TAPS_PER_PHASE * max_rate + 1
	taps = sps.firwin(numtaps, 1.0 / max_rate, window=("kaiser", KAISER_BETA))
	if up > 1:
		padded = np.zeros(int(math.ceil(numtaps / up)) * up)
		padded[:numtaps] = taps
		branches = padded.reshape(-1, up)
		branches = branches / (branches.sum(axis=0, keepdims=True) * up)
		taps = branches.reshape(-1)[:numtaps]
	else:
		taps = taps / taps.sum()
	return taps


def resample(clip: AudioClip, target_hz: int) -> AudioClip:
	"""
	Band-limited sample-rate conversion.

	Duration is preserved (output length = ceil(L * target / source)); the
	signal edges are extended with their boundary value before filtering.
	"""
	if target_hz <= 0:
		raise ContractError(f"target rate must be positive, got {target_hz}")
	source_hz = clip.sample_rate_hz
	if target_hz == source_hz:
		return clip
	g = math.gcd(int(source_hz), int(target_hz))
	up, down = int(target_hz) // g, int(source_hz) // g
	taps = design_resampling_filter(up, down)
	out = sps.resample_poly(clip.samples, up, down, window=taps, padtype="edge")
	return clip.with_samples(np.clip(out, -1.0, 1.0), target_hz)


def add_noise(clip: AudioClip, amplitude_ratio: float, seed: int) -> AudioClip:
	"""
	Add white Gaussian noise at a speech:noise RMS ratio.

	Args:
		clip: Source clip (must have nonzero RMS).
		amplitude_ratio: RMS(speech) / RMS(noise); 2.0 is roughly 6 dB SNR.
		seed: Noise seed; identical seeds give identical noise.

	Returns:
		Noisy clip, clipped to [-1, 1].
	"""
	if not amplitude_ratio > 0:
		raise ContractError(f"amplitude ratio must be positive, got {amplitude_ratio}")
	speech_rms = rms(clip.samples)
	if speech_rms == 0.0:
		raise DegenerateSignalError("cannot scale noise against a zero-RMS clip")
	noise = rng(seed).standard_normal(clip.samples.size)
	noise_rms = rms(noise)
	if noise_rms == 0.0:
		raise DegenerateSignalError("generated noise has zero RMS")
	noise *= (speech_rms / amplitude_ratio) / noise_rms
	return clip.with_samples(np.clip(clip.samples + noise, -1.0, 1.0))
