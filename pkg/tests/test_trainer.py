import numpy as np
import pytest

from capsid.core.errors import ConfigError, ContractError, DivergenceError, ProtocolViolationError
from capsid.corpus.splits import make_split_plan
from capsid.corpus.types import Emotion, SplitPlan
from capsid.features.archive import extract_archive
from capsid.features.mfcc import FeatureConfig
from capsid.models.networks import build_model
from capsid.services.trainer import (
	HISTORY_HEADER,
	TrainConfig,
	fold_plans,
	timing_report,
	train,
	validation_split,
	write_history_csv,
)

QUICK = TrainConfig(batch_size=8, max_epochs=2, seed=1)


@pytest.fixture
def plan(synthetic_corpus):
	manifest, _ = synthetic_corpus
	return make_split_plan(manifest, "esd_style", 3, train_utterances=2)


def test_train_records_epochs_and_restores_best(synthetic_corpus, synthetic_archive, plan, capsule_config):
	manifest, _ = synthetic_corpus
	model, history = train(build_model(capsule_config()), manifest, plan, synthetic_archive, QUICK)
	assert history.epochs == 2
	assert [r.epoch for r in history.records] == [1, 2]
	assert 1 <= history.best_epoch <= 2
	best = history.records[history.best_epoch - 1]
	assert best.val_loss == min(r.val_loss for r in history.records)
	assert model.training is False
	for record in history.records:
		assert 0.0 <= record.train_acc <= 100.0
		assert record.seconds > 0


@pytest.fixture(scope="module")
def long_run(synthetic_corpus, synthetic_archive, capsule_config):
	manifest, _ = synthetic_corpus
	split = make_split_plan(manifest, "esd_style", 3, train_utterances=2)
	cfg = TrainConfig(batch_size=8, max_epochs=50, patience=50, seed=1)
	return train(build_model(capsule_config()), manifest, split, synthetic_archive, cfg)


def test_micro_model_fits_training_speakers(long_run):
	_, history = long_run
	assert history.epochs == 50
	assert max(r.train_acc for r in history.records) == 100.0


def test_training_loss_falls_over_first_epochs(long_run):
	_, history = long_run
	losses = [r.train_loss for r in history.records[:5]]
	assert all(later <= earlier for earlier, later in zip(losses, losses[1:])), losses


def test_validation_holdout_is_stratified(synthetic_corpus, synthetic_archive, plan, capsule_config):
	manifest, _ = synthetic_corpus
	_, history = train(build_model(capsule_config()), manifest, plan, synthetic_archive, QUICK)
	assert len(plan.train_items) == 16
	assert len(history.val_items) == 2
	assert {manifest[i].speaker_id for i in history.val_items} == {"spk00", "spk01"}
	assert set(history.train_items) | set(history.val_items) == set(plan.train_items)


class RecordingArchive:
	"""Wraps a FeatureArchive and logs every item the trainer asks it for."""

	def __init__(self, inner):
		self.inner = inner
		self.requested: list[int] = []

	def get(self, index):
		self.requested.append(index)
		return self.inner.get(index)

	def stack(self, indices, stats=None):
		self.requested.extend(indices)
		return self.inner.stack(indices, stats)


def test_training_never_reads_test_items(synthetic_corpus, synthetic_archive, plan, capsule_config):
	manifest, _ = synthetic_corpus
	recording = RecordingArchive(synthetic_archive)
	_, history = train(build_model(capsule_config()), manifest, plan, recording, QUICK)
	requested = set(recording.requested)
	assert requested == set(plan.train_items)
	assert requested.isdisjoint(plan.test_items)
	assert history.items_read == requested
	assert all(manifest[i].emotion is Emotion.NEUTRAL for i in requested)


def test_training_is_deterministic(synthetic_corpus, synthetic_archive, plan, capsule_config):
	manifest, _ = synthetic_corpus
	first_model, first = train(build_model(capsule_config()), manifest, plan, synthetic_archive, QUICK)
	second_model, second = train(build_model(capsule_config()), manifest, plan, synthetic_archive, QUICK)
	assert first.metrics() == second.metrics()
	for name, values in first_model.state_dict().items():
		assert np.array_equal(second_model.state_dict()[name], values)


def test_non_neutral_training_item_is_rejected(synthetic_corpus, synthetic_archive, plan, capsule_config):
	manifest, _ = synthetic_corpus
	angry = next(i for i in plan.test_items if manifest[i].emotion is Emotion.ANGRY)
	bad = SplitPlan(0, plan.train_items + (angry,), tuple(i for i in plan.test_items if i != angry), plan.protocol, 0)
	with pytest.raises(ProtocolViolationError, match="non-neutral"):
		train(build_model(capsule_config()), manifest, bad, synthetic_archive, QUICK)


def test_overlapping_plan_is_rejected(synthetic_corpus, synthetic_archive, plan, capsule_config):
	manifest, _ = synthetic_corpus
	bad = SplitPlan(0, plan.train_items, plan.test_items + plan.train_items[:1], plan.protocol, 0)
	with pytest.raises(ProtocolViolationError, match="both"):
		train(build_model(capsule_config()), manifest, bad, synthetic_archive, QUICK)


def test_class_count_must_match_speakers(synthetic_corpus, synthetic_archive, plan, capsule_config):
	manifest, _ = synthetic_corpus
	with pytest.raises(ContractError, match="speakers"):
		train(build_model(capsule_config(n_classes=3)), manifest, plan, synthetic_archive, QUICK)


def test_divergence_carries_coordinates(synthetic_corpus, synthetic_archive, plan, capsule_config):
	manifest, _ = synthetic_corpus
	model = build_model(capsule_config())
	model.params["conv1.weight"].data = model.params["conv1.weight"].data * 1e300
	with np.errstate(over="ignore", invalid="ignore"):
		with pytest.raises(DivergenceError) as info:
			train(model, manifest, plan, synthetic_archive, QUICK)
	assert (info.value.epoch, info.value.batch) == (1, 0)


def test_bad_train_config(synthetic_corpus, synthetic_archive, plan, capsule_config):
	manifest, _ = synthetic_corpus
	with pytest.raises(ConfigError):
		train(build_model(capsule_config()), manifest, plan, synthetic_archive, TrainConfig(batch_size=0))
	assert len(TrainConfig(patience=0, trials=0, validation_fraction=1.0, cv_folds=1).validate()) == 4


def test_epoch_defaults_per_architecture():
	assert TrainConfig().epochs_for("capsnet_m") == 40
	assert TrainConfig().epochs_for("baseline_cnn") == 300
	assert TrainConfig(max_epochs=3).epochs_for("caps9") == 3


def test_cnn_trains_with_dropout_and_batchnorm(synthetic_corpus, plan, cnn_config):
	manifest, clips = synthetic_corpus
	archive, _ = extract_archive(manifest, FeatureConfig(target_frames=32), clips=clips, items=plan.train_items)
	model, history = train(build_model(cnn_config()), manifest, plan, archive, TrainConfig(batch_size=8, max_epochs=1))
	assert history.epochs == 1
	assert model.training is False
	assert np.any(model.buffers["bn2.running_mean"] != 0)


def test_validation_split_rules(tiny_manifest):
	items = list(range(len(tiny_manifest)))
	fit, held = validation_split(tiny_manifest, items, 0.1, seed=0)
	assert len(held) == 2
	assert sorted(fit + held) == items
	assert validation_split(tiny_manifest, items, 0.0, seed=0) == (items, [])
	# one item per speaker: nothing can be held out
	single = [0, 12]
	assert validation_split(tiny_manifest, single, 0.5, seed=0) == (single, [])
	assert validation_split(tiny_manifest, items, 0.1, seed=5) == validation_split(tiny_manifest, items, 0.1, seed=5)


def test_fold_plans_partition_repetitions(synthetic_corpus, plan):
	manifest, _ = synthetic_corpus
	folds = fold_plans(manifest, plan, k=2)
	assert [f.trial_index for f in folds] == [0, 1]
	for fold in folds:
		assert set(fold.train_items).isdisjoint(fold.test_items)
		assert set(fold.train_items) | set(fold.test_items) == set(plan.train_items)
	assert {manifest[i].repetition for i in folds[0].test_items} == {0, 2}
	with pytest.raises(ConfigError, match="repetitions"):
		fold_plans(manifest, plan, k=5)
	with pytest.raises(ConfigError):
		fold_plans(manifest, plan, k=1)


def test_history_csv_and_timing(tmp_path, synthetic_corpus, synthetic_archive, plan, capsule_config):
	manifest, _ = synthetic_corpus
	_, history = train(build_model(capsule_config()), manifest, plan, synthetic_archive, QUICK)
	path = write_history_csv(tmp_path / "run" / "history.csv", history)
	lines = path.read_text().splitlines()
	assert lines[0] == HISTORY_HEADER
	assert len(lines) == 1 + history.epochs
	assert lines[1].startswith("1,")
	(row,) = timing_report({"capsnet_m": history})
	assert row.epochs == 2
	assert row.total_seconds == pytest.approx(history.total_seconds)
	assert row.mean_epoch_seconds == pytest.approx(history.total_seconds / 2)
	assert row.total_minutes == pytest.approx(row.total_seconds / 60)
