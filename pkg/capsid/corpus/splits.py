"""
Text-independent split plans.

Every protocol trains on neutral speech only and tests on utterances that
never appear in training, so a model cannot lean on lexical content.
Utterance choice is a pure function of (manifest, protocol, seed): a
SplitMix64 stream seeded with the trial seed shuffles the sorted utterance
list, and trial k uses ``base_seed + k``.
"""
from __future__ import annotations

import json
from pathlib import Path

from capsid.core.errors import ConfigError
from capsid.core.seeding import SplitMix64
from capsid.corpus.types import CorpusKind, CorpusManifest, Emotion, SplitPlan, SplitProtocol

ESD_TRAIN_UTTERANCES = 4
SUSAS_TRAIN_WORDS = 15

_INCOMPATIBLE = {
	SplitProtocol.RAVDESS_STYLE: {CorpusKind.SUSAS_WORDS},
	SplitProtocol.SUSAS_STYLE: {CorpusKind.RAVDESS},
}


def _choose(utterances: list[str], count: int, seed: int) -> list[str]:
	return sorted(SplitMix64(seed).shuffle(utterances)[:count])


def make_split_plan(
	manifest: CorpusManifest,
	protocol: SplitProtocol | str,
	trial_seed: int,
	*,
	trial_index: int = 0,
	train_utterances: int | None = None,
	train_statement: str = "01",
) -> SplitPlan:
	"""
	Build the train/test assignment for one trial.

	Args:
		manifest: Corpus manifest.
		protocol: esd_style, ravdess_style or susas_style.
		trial_seed: Seed for the utterance draw.
		trial_index: Recorded on the plan.
		train_utterances: Override for the number of training utterances
			(esd_style default 4, susas_style default 15).
		train_statement: ravdess_style training statement.

	Returns:
		SplitPlan with neutral-only train items and utterance-disjoint test items.
	"""
	protocol = SplitProtocol(protocol)
	if manifest.corpus_kind in _INCOMPATIBLE.get(protocol, set()):
		raise ConfigError(f"protocol {protocol.value} cannot split a {manifest.corpus_kind.value} corpus")

	utterances = manifest.utterances
	if protocol is SplitProtocol.RAVDESS_STYLE:
		if train_statement not in utterances:
			raise ConfigError(f"ravdess_style needs statement {train_statement}; corpus has {utterances}")
		train_utts = [train_statement]
	else:
		default = ESD_TRAIN_UTTERANCES if protocol is SplitProtocol.ESD_STYLE else SUSAS_TRAIN_WORDS
		count = default if train_utterances is None else int(train_utterances)
		if count < 1 or len(utterances) <= count:
			raise ConfigError(
				f"{protocol.value} needs more than {count} distinct utterances, corpus has {len(utterances)}"
			)
		train_utts = _choose(utterances, count, trial_seed)

	train_set = set(train_utts)
	train_items: list[int] = []
	test_items: list[int] = []
	for index, entry in enumerate(manifest.entries):
		if entry.utterance_id in train_set:
			if entry.emotion is Emotion.NEUTRAL:
				train_items.append(index)
		else:
			test_items.append(index)
	if not train_items:
		raise ConfigError("split has no neutral training material")
	if not test_items:
		raise ConfigError("split has no test material")
	return SplitPlan(
		trial_index=trial_index,
		train_items=tuple(train_items),
		test_items=tuple(test_items),
		protocol=protocol,
		seed=int(trial_seed),
		train_utterances=tuple(sorted(train_set)),
	)


def trial_plans(
	manifest: CorpusManifest,
	protocol: SplitProtocol | str,
	base_seed: int,
	n_trials: int,
	**kwargs,
) -> list[SplitPlan]:
	"""Utterance-rotation trials; trial k is seeded with ``base_seed + k``."""
	return [
		make_split_plan(manifest, protocol, base_seed + k, trial_index=k, **kwargs)
		for k in range(n_trials)
	]


def save_split_plan(path: str | Path, plan: SplitPlan) -> None:
	target = Path(path)
	target.parent.mkdir(parents=True, exist_ok=True)
	target.write_text(json.dumps(plan.to_json_dict(), sort_keys=True), encoding="utf-8")


def load_split_plan(path: str | Path) -> SplitPlan:
	return SplitPlan.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))
