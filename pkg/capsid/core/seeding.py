"""
Seed derivation.

All randomness flows from one global seed. Components ask for a named
sub-seed (``split``, ``init``, ``shuffle``, ``noise``, ``synth``) so each one
is reproducible on its own and adding draws in one place never shifts
another component's stream.
"""
from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
	"""One SplitMix64 output step for state ``x``."""
	z = (x + 0x9E3779B97F4A7C15) & MASK64
	z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
	z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
	return z ^ (z >> 31)


def derive_seed(seed: int, name: str, *extra: int) -> int:
	"""
	Derive a 64-bit sub-seed from a parent seed, a component name and
	optional integer coordinates (trial index, clip index, ...).
	"""
	state = splitmix64((int(seed) & MASK64) ^ zlib.crc32(name.encode("utf-8")))
	for value in extra:
		state = splitmix64(state ^ (int(value) & MASK64))
	return state


def rng(seed: int) -> np.random.Generator:
	"""A PCG64 generator seeded from a 64-bit value."""
	return np.random.Generator(np.random.PCG64(int(seed) & MASK64))


class SplitMix64:
	"""Tiny sequential SplitMix64 stream, used where a portable draw order matters."""

	def __init__(self, seed: int):
		self.state = int(seed) & MASK64

	def next(self) -> int:
		self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
		return splitmix64((self.state - 0x9E3779B97F4A7C15) & MASK64)

	def below(self, bound: int) -> int:
		"""Uniform integer in [0, bound) by rejection."""
		if bound <= 0:
			raise ValueError("bound must be positive")
		limit = (MASK64 + 1) - ((MASK64 + 1) % bound)
		while True:
			value = self.next()
			if value < limit:
				return value % bound

	def shuffle(self, items: list) -> list:
		"""Fisher-Yates shuffle returning a new list."""
		out = list(items)
		for i in range(len(out) - 1, 0, -1):
			j = self.below(i + 1)
			out[i], out[j] = out[j], out[i]
		return out
