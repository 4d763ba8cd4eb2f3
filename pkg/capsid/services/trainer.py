"""
Neutral-only training loop.

``train`` fits one model on one SplitPlan: a speaker-stratified slice of the
training items is held out for early stopping, the rest is shuffled into
mini-batches each epoch and fed to Adam. The returned model carries the
parameters from the epoch with the lowest validation loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
import time
from typing import Mapping, Sequence

import numpy as np

from capsid.autodiff.optim import Adam
from capsid.autodiff.tensor import no_grad
from capsid.core.errors import ConfigError, ContractError, DivergenceError, NumericFaultError, ProtocolViolationError
from capsid.core.seeding import derive_seed, rng
from capsid.corpus.types import CorpusManifest, Emotion, SplitPlan, labels_for
from capsid.features.archive import FeatureArchive, ReadRecorder
from capsid.features.mfcc import standardization_stats
from capsid.models.losses import LossConfig
from capsid.models.networks import Architecture, Model, predict_classes

logger = logging.getLogger(__name__)

CAPSULE_EPOCHS = 40
CNN_EPOCHS = 300
HISTORY_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,seconds"


@dataclass(frozen=True)
class TrainConfig:
	batch_size: int = 64
	learning_rate: float = 0.001
	# None picks 40 for capsule models and 300 for the baseline CNN
	max_epochs: int | None = None
	patience: int = 10
	seed: int = 0
	trials: int = 5
	validation_fraction: float = 0.1
	cv_folds: int = 0

	def validate(self) -> list[str]:
		problems = []
		if self.batch_size < 1:
			problems.append(f"train.batch_size: must be >= 1, got {self.batch_size}")
		if not self.learning_rate > 0:
			problems.append(f"train.learning_rate: must be > 0, got {self.learning_rate}")
		if self.max_epochs is not None and self.max_epochs < 1:
			problems.append(f"train.max_epochs: must be >= 1, got {self.max_epochs}")
		if self.patience < 1:
			problems.append(f"train.patience: must be >= 1, got {self.patience}")
		if self.trials < 1:
			problems.append(f"train.trials: must be >= 1, got {self.trials}")
		if not 0.0 <= self.validation_fraction < 1.0:
			problems.append(f"train.validation_fraction: {self.validation_fraction} not in [0, 1)")
		if self.cv_folds == 1 or self.cv_folds < 0:
			problems.append(f"train.cv_folds: 0 (off) or >= 2, got {self.cv_folds}")
		return problems

	def epochs_for(self, architecture: Architecture | str) -> int:
		if self.max_epochs is not None:
			return self.max_epochs
		return CAPSULE_EPOCHS if Architecture(architecture).is_capsule else CNN_EPOCHS


@dataclass(frozen=True)
class EpochRecord:
	epoch: int
	train_loss: float
	train_acc: float
	val_loss: float | None
	val_acc: float | None
	seconds: float


@dataclass(frozen=True)
class TrainHistory:
	"""
	Attributes:
		records: One EpochRecord per completed epoch.
		best_epoch: Epoch whose parameters the trained model carries.
		items_read: Every manifest item whose features were read while training.
		train_items: Items the optimizer saw.
		val_items: Held-out items used for early stopping.
		stats: (mean, std) used to standardise inputs.
	"""

	records: tuple[EpochRecord, ...]
	best_epoch: int
	items_read: frozenset[int]
	train_items: tuple[int, ...]
	val_items: tuple[int, ...]
	stats: tuple[np.ndarray, np.ndarray] = field(repr=False, compare=False)

	@property
	def epochs(self) -> int:
		return len(self.records)

	@property
	def total_seconds(self) -> float:
		return float(sum(r.seconds for r in self.records))

	def metrics(self) -> list[tuple[float, float, float | None, float | None]]:
		"""Per-epoch (train_loss, train_acc, val_loss, val_acc); wall-clock time excluded."""
		return [(r.train_loss, r.train_acc, r.val_loss, r.val_acc) for r in self.records]

	def to_csv(self) -> str:
		lines = [HISTORY_HEADER]
		for r in self.records:
			val_loss = "" if r.val_loss is None else repr(r.val_loss)
			val_acc = "" if r.val_acc is None else repr(r.val_acc)
			lines.append(f"{r.epoch},{r.train_loss!r},{r.train_acc!r},{val_loss},{val_acc},{r.seconds:.6f}")
		return "\n".join(lines) + "\n"


def write_history_csv(path: str | Path, history: TrainHistory) -> Path:
	target = Path(path)
	target.parent.mkdir(parents=True, exist_ok=True)
	target.write_text(history.to_csv(), encoding="utf-8")
	return target


def validation_split(
	manifest: CorpusManifest,
	items: Sequence[int],
	fraction: float,
	seed: int,
) -> tuple[list[int], list[int]]:
	"""
	Speaker-stratified holdout.

	Each speaker gives up ``round(fraction * n)`` of its items (at most n - 1,
	so every speaker keeps training material).

	Returns:
		(fit items, validation items), both in manifest order.
	"""
	if fraction <= 0.0:
		return sorted(items), []
	gen = rng(seed)
	by_speaker: dict[str, list[int]] = {}
	for index in sorted(items):
		by_speaker.setdefault(manifest[index].speaker_id, []).append(index)
	held: set[int] = set()
	for speaker in sorted(by_speaker):
		members = by_speaker[speaker]
		count = min(len(members) - 1, int(round(fraction * len(members))))
		if count > 0:
			held.update(members[k] for k in gen.permutation(len(members))[:count])
	fit = [i for i in sorted(items) if i not in held]
	return fit, sorted(held)


def _check_plan(manifest: CorpusManifest, split: SplitPlan) -> None:
	non_neutral = [i for i in split.train_items if manifest[i].emotion is not Emotion.NEUTRAL]
	if non_neutral:
		raise ProtocolViolationError(
			f"{len(non_neutral)} non-neutral items in the training set (first: {manifest[non_neutral[0]].path})"
		)
	shared = set(split.train_items) & set(split.test_items)
	if shared:
		raise ProtocolViolationError(f"{len(shared)} items are in both train and test")


def _evaluate_loss(
	model: Model,
	archive: FeatureArchive | ReadRecorder,
	manifest: CorpusManifest,
	items: Sequence[int],
	stats,
	batch_size: int,
	loss_cfg: LossConfig,
	epoch: int,
) -> tuple[float, float]:
	model.eval()
	total, correct = 0.0, 0
	with no_grad():
		for b, start in enumerate(range(0, len(items), batch_size)):
			batch = items[start:start + batch_size]
			labels = labels_for(manifest, batch)
			try:
				loss, out = model.loss(archive.stack(batch, stats), labels, loss_cfg)
			except NumericFaultError as exc:
				raise DivergenceError(f"validation: {exc}", epoch=epoch, batch=b) from exc
			total += loss.item() * len(batch)
			correct += int(np.sum(predict_classes(out.scores.data) == labels))
	return total / len(items), 100.0 * correct / len(items)


def train(
	model: Model,
	manifest: CorpusManifest,
	split: SplitPlan,
	archive: FeatureArchive,
	cfg: TrainConfig = TrainConfig(),
	loss_cfg: LossConfig = LossConfig(),
) -> tuple[Model, TrainHistory]:
	"""
	Train ``model`` in place on the split's (neutral) training items.

	Raises:
		ProtocolViolationError: The plan trains on non-neutral speech or overlaps test.
		DivergenceError: A loss or gradient went non-finite (epoch/batch attached).
	"""
	problems = cfg.validate() + loss_cfg.validate()
	if problems:
		raise ConfigError(problems)
	_check_plan(manifest, split)
	if model.cfg.n_classes != len(manifest.speakers):
		raise ContractError(f"model has {model.cfg.n_classes} classes, corpus has {len(manifest.speakers)} speakers")

	fit_items, val_items = validation_split(
		manifest, split.train_items, cfg.validation_fraction, derive_seed(cfg.seed, "split", split.trial_index)
	)
	source = ReadRecorder(archive)
	stats = standardization_stats([source.get(i) for i in fit_items])
	optimizer = Adam(model.parameters(), cfg.learning_rate)
	epochs = cfg.epochs_for(model.cfg.architecture)
	logger.info(
		"training %s on %d items (%d held out) for up to %d epochs",
		model.cfg.architecture,
		len(fit_items),
		len(val_items),
		epochs,
	)

	records: list[EpochRecord] = []
	best_loss = math.inf
	best_epoch = 0
	best_state = model.state_dict()
	stale = 0
	for epoch in range(1, epochs + 1):
		started = time.perf_counter()
		model.train()
		order = [fit_items[k] for k in rng(derive_seed(cfg.seed, "shuffle", split.trial_index, epoch)).permutation(len(fit_items))]
		total, correct = 0.0, 0
		for b, start in enumerate(range(0, len(order), cfg.batch_size)):
			batch = order[start:start + cfg.batch_size]
			labels = labels_for(manifest, batch)
			optimizer.zero_grad()
			try:
				loss, out = model.loss(source.stack(batch, stats), labels, loss_cfg)
				value = loss.item()
				if not math.isfinite(value):
					raise NumericFaultError(f"loss is {value}")
				loss.backward()
			except NumericFaultError as exc:
				raise DivergenceError(str(exc), epoch=epoch, batch=b) from exc
			optimizer.step()
			total += value * len(batch)
			correct += int(np.sum(predict_classes(out.scores.data) == labels))
		train_loss = total / len(order)
		train_acc = 100.0 * correct / len(order)

		val_loss = val_acc = None
		if val_items:
			val_loss, val_acc = _evaluate_loss(model, source, manifest, val_items, stats, cfg.batch_size, loss_cfg, epoch)
		seconds = max(time.perf_counter() - started, 1e-9)
		records.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc, seconds))
		logger.info(
			"epoch %d: loss %.5f acc %.1f%% val_loss %s val_acc %s (%.2fs)",
			epoch,
			train_loss,
			train_acc,
			"-" if val_loss is None else f"{val_loss:.5f}",
			"-" if val_acc is None else f"{val_acc:.1f}%",
			seconds,
		)

		monitored = train_loss if val_loss is None else val_loss
		if monitored < best_loss:
			best_loss, best_epoch, stale = monitored, epoch, 0
			best_state = model.state_dict()
		else:
			stale += 1
			if stale >= cfg.patience:
				logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
				break

	model.load_state_dict(best_state)
	model.eval()
	history = TrainHistory(
		records=tuple(records),
		best_epoch=best_epoch,
		items_read=frozenset(source.read),
		train_items=tuple(fit_items),
		val_items=tuple(val_items),
		stats=stats,
	)
	return model, history


def fold_plans(manifest: CorpusManifest, split: SplitPlan, k: int = 5) -> list[SplitPlan]:
	"""
	K-fold plans over repetitions of the split's neutral training material.

	Repetition numbers are dealt round-robin into ``k`` folds; fold f trains
	on the other folds and tests on its own items.
	"""
	if k < 2:
		raise ConfigError(f"cross-validation needs at least 2 folds, got {k}")
	repetitions = sorted({manifest[i].repetition for i in split.train_items})
	if len(repetitions) < k:
		raise ConfigError(f"{k}-fold cross-validation needs {k} repetitions, training material has {len(repetitions)}")
	fold_of = {rep: n % k for n, rep in enumerate(repetitions)}
	plans = []
	for fold in range(k):
		held = tuple(i for i in split.train_items if fold_of[manifest[i].repetition] == fold)
		kept = tuple(i for i in split.train_items if fold_of[manifest[i].repetition] != fold)
		plans.append(
			SplitPlan(
				trial_index=fold,
				train_items=kept,
				test_items=held,
				protocol=split.protocol,
				seed=split.seed,
				train_utterances=split.train_utterances,
			)
		)
	return plans


@dataclass(frozen=True)
class TimingRow:
	model: str
	epochs: int
	mean_epoch_seconds: float
	total_seconds: float

	@property
	def total_minutes(self) -> float:
		return self.total_seconds / 60.0


def timing_report(histories: Mapping[str, TrainHistory]) -> list[TimingRow]:
	"""One row per named history: epochs run, mean seconds per epoch, total time."""
	rows = []
	for name, history in histories.items():
		if not history.records:
			raise ContractError(f"history {name!r} has no epochs")
		total = history.total_seconds
		rows.append(TimingRow(name, history.epochs, total / history.epochs, total))
	return rows
