"""
Wilcoxon signed-rank test for paired per-trial accuracies.

Small samples (n <= 20 nonzero differences) get the exact null distribution:
the statistic W+ is a sum of a random subset of the ranks, so its
distribution is the coefficient list of prod_r (1 + x^r), built here over
doubled ranks so midranks stay integral. Larger samples use the normal
approximation with the tie-corrected variance.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

from capsid.core.errors import ContractError, DegenerateTestError

logger = logging.getLogger(__name__)

EXACT_MAX_N = 20
MIN_PAIRS = 5
ALTERNATIVES = ("two-sided", "greater", "less")


@dataclass(frozen=True)
class PairedSample:
	"""Per-trial (or per-fold) scores of two systems, paired by position."""

	first: tuple[float, ...]
	second: tuple[float, ...]

	def __post_init__(self):
		object.__setattr__(self, "first", tuple(float(x) for x in self.first))
		object.__setattr__(self, "second", tuple(float(x) for x in self.second))
		if len(self.first) != len(self.second):
			raise ContractError(f"paired samples differ in length: {len(self.first)} vs {len(self.second)}")

	def differences(self) -> np.ndarray:
		return np.asarray(self.first) - np.asarray(self.second)


@dataclass(frozen=True)
class WilcoxonResult:
	statistic: float
	w_plus: float
	w_minus: float
	p_value: float
	n: int
	method: str
	alternative: str


def exact_null_distribution(ranks: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
	"""
	Distribution of W+ under the null for the given (possibly tied) ranks.

	Returns:
		(values, probabilities) over every attainable W+; probabilities sum to 1.
	"""
	doubled = np.rint(2 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
	counts = np.zeros(int(doubled.sum()) + 1)
	counts[0] = 1.0
	for r in doubled:
		shifted = np.zeros_like(counts)
		shifted[r:] = counts[: counts.size - r]
		counts = counts + shifted
	support = np.nonzero(counts)[0]
	return support / 2.0, counts[support] / 2.0 ** doubled.size


def wilcoxon_signed_rank(pairs: PairedSample, alternative: str = "two-sided") -> WilcoxonResult:
	"""
	Args:
		pairs: Paired scores; differences are first - second.
		alternative: "two-sided", "greater" (first tends larger) or "less".

	Raises:
		DegenerateTestError: Every difference is zero, or fewer than 5 remain.
	"""
	if alternative not in ALTERNATIVES:
		raise ContractError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")
	diffs = pairs.differences()
	diffs = diffs[diffs != 0]
	if diffs.size == 0:
		raise DegenerateTestError("all paired differences are zero")
	if diffs.size < MIN_PAIRS:
		raise DegenerateTestError(f"need at least {MIN_PAIRS} nonzero differences, got {diffs.size}")
	ranks = sps.rankdata(np.abs(diffs))
	w_plus = float(ranks[diffs > 0].sum())
	w_minus = float(ranks[diffs < 0].sum())
	n = int(diffs.size)
	if n <= EXACT_MAX_N:
		values, probs = exact_null_distribution(ranks)
		lower = float(probs[values <= w_plus + 1e-9].sum())
		upper = float(probs[values >= w_plus - 1e-9].sum())
		method = "exact"
	else:
		_, tie_counts = np.unique(ranks, return_counts=True)
		mean = n * (n + 1) / 4.0
		var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
		z = (w_plus - mean) / np.sqrt(var)
		lower = float(sps.norm.cdf(z))
		upper = float(sps.norm.sf(z))
		method = "normal"
	if alternative == "greater":
		p = upper
	elif alternative == "less":
		p = lower
	else:
		p = min(1.0, 2.0 * min(lower, upper))
	logger.debug("wilcoxon n=%d W+=%.1f W-=%.1f p=%.4g (%s)", n, w_plus, w_minus, p, method)
	return WilcoxonResult(min(w_plus, w_minus), w_plus, w_minus, p, n, method, alternative)


@dataclass(frozen=True)
class PairwiseRow:
	reference: str
	other: str
	statistic: float | None
	p_value: float | None
	note: str = ""


def pairwise_wilcoxon(
	scores_by_system: Mapping[str, Sequence[float]],
	reference: str,
	alternative: str = "two-sided",
) -> list[PairwiseRow]:
	"""
	Test the reference system against every other system.

	Comparisons that cannot be tested (too few or all-zero differences) are
	kept as rows with no p-value and the reason in ``note``.
	"""
	if reference not in scores_by_system:
		raise ContractError(f"reference system {reference!r} not among {sorted(scores_by_system)}")
	rows = []
	for name, scores in scores_by_system.items():
		if name == reference:
			continue
		try:
			result = wilcoxon_signed_rank(PairedSample(tuple(scores_by_system[reference]), tuple(scores)), alternative)
		except DegenerateTestError as exc:
			logger.warning("%s vs %s: %s", reference, name, exc)
			rows.append(PairwiseRow(reference, name, None, None, str(exc)))
			continue
		rows.append(PairwiseRow(reference, name, result.statistic, result.p_value))
	return rows
