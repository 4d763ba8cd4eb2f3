"""
MFCC feature chain.

framing (pre-emphasis + Hamming) -> DFT power spectrum -> triangular mel
filterbank -> log -> orthonormal DCT-II, plus regression deltas, stacked
into a 40 x target_frames matrix (20 MFCC rows over 20 delta rows) and
zero-padded on the right.

Every step is a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from capsid.core.errors import ConfigError, ContractError, TooShortError
from capsid.corpus.types import AudioClip
from capsid.features.signal import resample

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FeatureConfig:
	frame_ms: float = 25.0
	hop_ms: float = 10.0
	n_fft: int | None = None
	n_mel_filters: int = 40
	n_cepstra: int = 20
	fmin_hz: float = 0.0
	fmax_hz: float | None = None
	target_frames: int = 300
	pre_emphasis: float = 0.97
	delta_window: int = 2
	resample_hz: int | None = None

	def validate(self) -> list[str]:
		problems = []
		if not self.frame_ms > self.hop_ms > 0:
			problems.append(f"features.frame_ms/hop_ms: need frame_ms > hop_ms > 0, got {self.frame_ms}/{self.hop_ms}")
		if self.n_cepstra > self.n_mel_filters:
			problems.append(f"features.n_cepstra: {self.n_cepstra} exceeds n_mel_filters {self.n_mel_filters}")
		if self.n_cepstra < 1 or self.n_mel_filters < 1:
			problems.append("features.n_cepstra/n_mel_filters: must be positive")
		if not 0.0 <= self.pre_emphasis < 1.0:
			problems.append(f"features.pre_emphasis: {self.pre_emphasis} not in [0, 1)")
		if self.target_frames < 1:
			problems.append("features.target_frames: must be positive")
		if self.delta_window < 1:
			problems.append("features.delta_window: must be positive")
		if self.n_fft is not None and (self.n_fft < 2 or self.n_fft & (self.n_fft - 1)):
			problems.append(f"features.n_fft: {self.n_fft} is not a power of two")
		if self.fmin_hz < 0:
			problems.append("features.fmin_hz: must be non-negative")
		if self.resample_hz is not None and self.resample_hz <= 0:
			problems.append("features.resample_hz: must be positive")
		return problems

	@property
	def n_features(self) -> int:
		return 2 * self.n_cepstra

	def frame_length(self, sample_rate_hz: int) -> int:
		return int(round(self.frame_ms * sample_rate_hz / 1000.0))

	def hop_length(self, sample_rate_hz: int) -> int:
		return int(round(self.hop_ms * sample_rate_hz / 1000.0))

	def fft_size(self, sample_rate_hz: int) -> int:
		if self.n_fft is not None:
			return self.n_fft
		return 1 << max(0, math.ceil(math.log2(self.frame_length(sample_rate_hz))))


@dataclass(frozen=True)
class FeatureMatrix:
	values: np.ndarray
	n_valid_frames: int

	def __post_init__(self):
		values = np.array(self.values, dtype=np.float64)
		if values.ndim != 2:
			raise ContractError(f"feature matrix must be 2-D, got shape {values.shape}")
		if not np.all(np.isfinite(values)):
			raise ContractError("feature matrix has non-finite entries")
		if not 0 <= self.n_valid_frames <= values.shape[1]:
			raise ContractError(f"n_valid_frames {self.n_valid_frames} outside [0, {values.shape[1]}]")
		values.setflags(write=False)
		object.__setattr__(self, "values", values)

	@property
	def shape(self) -> tuple[int, int]:
		return self.values.shape


def hz_to_mel(hz):
	return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
	return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def frame_signal(clip: AudioClip, cfg: FeatureConfig) -> np.ndarray:
	"""
	Pre-emphasise, slice into overlapping frames and apply a Hamming window.

	Returns:
		[n_frames x frame_len] with n_frames = floor((L - W) / H) + 1.
	"""
	width = cfg.frame_length(clip.sample_rate_hz)
	hop = cfg.hop_length(clip.sample_rate_hz)
	x = clip.samples
	if width < 1 or hop < 1:
		raise ConfigError(f"frame/hop shorter than one sample at {clip.sample_rate_hz} Hz")
	if x.size < width:
		raise TooShortError(f"clip of {x.size} samples is shorter than one {width}-sample frame")
	emphasised = np.empty_like(x)
	emphasised[0] = x[0]
	emphasised[1:] = x[1:] - cfg.pre_emphasis * x[:-1]
	n_frames = (x.size - width) // hop + 1
	frames = np.lib.stride_tricks.sliding_window_view(emphasised, width)[::hop][:n_frames]
	return frames * np.hamming(width)


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
	"""|DFT_k|^2 / n_fft for k = 0 .. n_fft/2."""
	frames = np.atleast_2d(frames)
	if n_fft < frames.shape[1] or n_fft & (n_fft - 1):
		raise ConfigError(f"n_fft {n_fft} must be a power of two >= frame length {frames.shape[1]}")
	spectrum = np.fft.rfft(frames, n=n_fft, axis=1)
	return (spectrum.real ** 2 + spectrum.imag ** 2) / n_fft


def mel_filterbank(cfg: FeatureConfig, sample_rate_hz: int) -> np.ndarray:
	"""
	Triangular filters with centres equally spaced on the mel scale.

	Returns:
		[n_mel_filters x (n_fft/2 + 1)], each row peaking at exactly 1.
	"""
	n_fft = cfg.fft_size(sample_rate_hz)
	fmax = sample_rate_hz / 2.0 if cfg.fmax_hz is None else cfg.fmax_hz
	if fmax > sample_rate_hz / 2.0:
		raise ConfigError(f"fmax_hz {fmax} above Nyquist {sample_rate_hz / 2.0}")
	if cfg.fmin_hz >= fmax:
		raise ConfigError(f"fmin_hz {cfg.fmin_hz} must be below fmax_hz {fmax}")
	mel_points = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(fmax), cfg.n_mel_filters + 2)
	bins = np.floor((n_fft + 1) * mel_to_hz(mel_points) / sample_rate_hz).astype(int)
	bins = np.minimum(bins, n_fft // 2)
	if np.any(np.diff(bins) <= 0):
		raise ConfigError(
			f"{cfg.n_mel_filters} mel filters collapse onto duplicate FFT bins at n_fft={n_fft}, {sample_rate_hz} Hz"
		)
	filters = np.zeros((cfg.n_mel_filters, n_fft // 2 + 1))
	for j in range(cfg.n_mel_filters):
		left, centre, right = bins[j], bins[j + 1], bins[j + 2]
		rising = np.arange(left, centre)
		filters[j, rising] = (rising - left) / (centre - left)
		falling = np.arange(centre, right + 1)
		filters[j, falling] = (right - falling) / (right - centre)
	return filters


def log_mel(powspec: np.ndarray, filters: np.ndarray) -> np.ndarray:
	"""ln(max(filterbank energies, 1e-10)), one row per frame."""
	powspec = np.atleast_2d(powspec)
	if powspec.shape[1] != filters.shape[1]:
		raise ContractError(f"power spectrum width {powspec.shape[1]} != filterbank width {filters.shape[1]}")
	return np.log(np.maximum(powspec @ filters.T, LOG_FLOOR))


def dct_matrix(n: int) -> np.ndarray:
	"""Orthonormal DCT-II matrix M with M @ M.T = I."""
	k = np.arange(n)[:, None]
	i = np.arange(n)[None, :]
	matrix = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
	matrix[0] /= np.sqrt(2.0)
	return matrix


def dct_cepstra(logmel: np.ndarray, n_cepstra: int) -> np.ndarray:
	"""Orthonormal DCT-II of each row, keeping coefficients 0 .. n_cepstra-1."""
	logmel = np.atleast_2d(logmel)
	if n_cepstra > logmel.shape[1]:
		raise ConfigError(f"n_cepstra {n_cepstra} exceeds {logmel.shape[1]} filter outputs")
	return logmel @ dct_matrix(logmel.shape[1])[:n_cepstra].T


def delta_features(mfcc: np.ndarray, delta_window: int) -> np.ndarray:
	"""
	Regression deltas along the frame axis (axis 0).

	d_t = sum_{n=1..N} n (c_{t+n} - c_{t-n}) / (2 sum n^2), with boundary
	frames repeated at the edges.
	"""
	mfcc = np.atleast_2d(mfcc)
	if mfcc.shape[0] < 2:
		raise ContractError("delta features need at least 2 frames")
	n = delta_window
	padded = np.pad(mfcc, ((n, n), (0, 0)), mode="edge")
	frames = mfcc.shape[0]
	numerator = np.zeros_like(mfcc)
	for k in range(1, n + 1):
		numerator += k * (padded[n + k:n + k + frames] - padded[n - k:n - k + frames])
	return numerator / (2.0 * sum(k * k for k in range(1, n + 1)))


def mfcc_frames(clip: AudioClip, cfg: FeatureConfig) -> np.ndarray:
	"""MFCCs for every frame: [n_frames x n_cepstra]."""
	frames = frame_signal(clip, cfg)
	powspec = power_spectrum(frames, cfg.fft_size(clip.sample_rate_hz))
	filters = mel_filterbank(cfg, clip.sample_rate_hz)
	return dct_cepstra(log_mel(powspec, filters), cfg.n_cepstra)


def extract_features(clip: AudioClip, cfg: FeatureConfig) -> FeatureMatrix:
	"""
	Full chain for one clip.

	Clips longer than ``target_frames`` keep their first frames; shorter
	ones are zero-padded on the right.
	"""
	if cfg.resample_hz is not None and cfg.resample_hz != clip.sample_rate_hz:
		clip = resample(clip, cfg.resample_hz)
	mfcc = mfcc_frames(clip, cfg)
	deltas = delta_features(mfcc, cfg.delta_window) if mfcc.shape[0] >= 2 else np.zeros_like(mfcc)
	stacked = np.concatenate([mfcc, deltas], axis=1).T
	n_valid = min(stacked.shape[1], cfg.target_frames)
	values = np.zeros((cfg.n_features, cfg.target_frames))
	values[:, :n_valid] = stacked[:, :n_valid]
	return FeatureMatrix(values, n_valid)


def standardization_stats(matrices: list[FeatureMatrix]) -> tuple[np.ndarray, np.ndarray]:
	"""
	Per-coefficient mean and standard deviation over all valid frames.

	Returns:
		(mean, std), each of length n_features; std is floored at 1e-8.
	"""
	if not matrices:
		raise ContractError("no feature matrices to standardise")
	columns = np.concatenate([fm.values[:, : fm.n_valid_frames] for fm in matrices], axis=1)
	if columns.shape[1] == 0:
		raise ContractError("no valid frames to standardise")
	return columns.mean(axis=1), np.maximum(columns.std(axis=1), 1e-8)


def standardize(values: np.ndarray, n_valid_frames: int, stats: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
	"""z-score the valid region; padding stays exactly zero."""
	mean, std = stats
	out = np.zeros_like(values, dtype=np.float64)
	out[:, :n_valid_frames] = (values[:, :n_valid_frames] - mean[:, None]) / std[:, None]
	return out
