"""
Speaker-identification metrics and report assembly.

Everything here is a pure function of (scores or predictions, labels)
except ``evaluate_model``, which scores a frozen model over test items.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
import logging
import time
from typing import Any, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix as _sk_confusion_matrix
from sklearn.metrics import roc_auc_score

from capsid.core.errors import ContractError, UndefinedMetricError
from capsid.core.runner import TaskRunner, get_default_runner, raise_first_failure
from capsid.corpus.types import CorpusManifest, Emotion, labels_for
from capsid.features.archive import FeatureArchive
from capsid.models.networks import Model, predict_classes

logger = logging.getLogger(__name__)

AVERAGE_KEY = "average"


@dataclass(frozen=True)
class SpeakerScore:
	precision: float
	recall: float
	f1: float


@dataclass(frozen=True)
class EvalReport:
	"""
	One evaluation. Accuracies are percentages; precision/recall/F1 and AUC
	are fractions. ``per_emotion_accuracy`` holds one entry per emotion
	present plus ``average`` (unweighted mean over those emotions).
	"""

	overall_accuracy: float
	per_emotion_accuracy: dict[str, float]
	per_speaker: dict[str, SpeakerScore]
	auc_macro: float | None
	confusion: tuple[tuple[int, ...], ...]
	n_test_items: int
	speakers: tuple[str, ...]
	auc_skipped: tuple[str, ...] = ()
	n_trials: int = 1
	extra: dict[str, Any] = field(default_factory=dict)

	def confusion_array(self) -> np.ndarray:
		return np.asarray(self.confusion, dtype=np.int64)

	def to_json_dict(self) -> dict[str, Any]:
		return {
			"overall_accuracy": self.overall_accuracy,
			"per_emotion_accuracy": dict(self.per_emotion_accuracy),
			"per_speaker": {
				speaker: {"precision": s.precision, "recall": s.recall, "f1": s.f1}
				for speaker, s in self.per_speaker.items()
			},
			"auc_macro": self.auc_macro,
			"auc_skipped": list(self.auc_skipped),
			"confusion": [list(row) for row in self.confusion],
			"n_test_items": self.n_test_items,
			"speakers": list(self.speakers),
			"n_trials": self.n_trials,
			"extra": dict(self.extra),
		}

	@classmethod
	def from_json_dict(cls, data: dict[str, Any]) -> EvalReport:
		try:
			return cls(
				overall_accuracy=float(data["overall_accuracy"]),
				per_emotion_accuracy={k: float(v) for k, v in data["per_emotion_accuracy"].items()},
				per_speaker={k: SpeakerScore(**v) for k, v in data["per_speaker"].items()},
				auc_macro=None if data.get("auc_macro") is None else float(data["auc_macro"]),
				confusion=tuple(tuple(int(x) for x in row) for row in data["confusion"]),
				n_test_items=int(data["n_test_items"]),
				speakers=tuple(data["speakers"]),
				auc_skipped=tuple(data.get("auc_skipped", ())),
				n_trials=int(data.get("n_trials", 1)),
				extra=dict(data.get("extra", {})),
			)
		except (KeyError, TypeError, ValueError) as exc:
			raise ContractError(f"malformed report: {exc}") from exc


def confusion_matrix(labels: Sequence[int], predictions: Sequence[int], n_classes: int) -> np.ndarray:
	"""Rows are true speakers, columns predicted speakers."""
	labels = np.asarray(labels, dtype=np.int64)
	predictions = np.asarray(predictions, dtype=np.int64)
	if labels.shape != predictions.shape:
		raise ContractError(f"{labels.size} labels for {predictions.size} predictions")
	if labels.size == 0:
		return np.zeros((n_classes, n_classes), dtype=np.int64)
	return _sk_confusion_matrix(labels, predictions, labels=list(range(n_classes))).astype(np.int64)


def metrics(confusion) -> tuple[float, list[SpeakerScore]]:
	"""
	Accuracy (percent) and per-class precision/recall/F1 from a confusion matrix.

	Zero denominators give 0.
	"""
	confusion = np.asarray(confusion)
	if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1] or confusion.size == 0:
		raise ContractError(f"confusion matrix must be square and non-empty, got shape {confusion.shape}")
	if np.any(confusion < 0):
		raise ContractError("confusion matrix has negative counts")
	total = confusion.sum()
	if total == 0:
		raise ContractError("confusion matrix has no items")
	tp = np.diag(confusion).astype(np.float64)
	predicted = confusion.sum(axis=0)
	actual = confusion.sum(axis=1)
	scores = []
	for k in range(confusion.shape[0]):
		precision = tp[k] / predicted[k] if predicted[k] else 0.0
		recall = tp[k] / actual[k] if actual[k] else 0.0
		f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
		scores.append(SpeakerScore(float(precision), float(recall), float(f1)))
	return float(100.0 * tp.sum() / total), scores


def micro_average(confusion) -> tuple[float, float]:
	"""
	Micro-averaged (precision, recall); both equal accuracy for single-label
	data. An empty matrix gives (0, 0), like the zero denominators in ``metrics``.
	"""
	confusion = np.asarray(confusion, dtype=np.float64)
	tp = np.trace(confusion)
	predicted = confusion.sum(axis=0).sum()
	actual = confusion.sum(axis=1).sum()
	return float(tp / predicted) if predicted else 0.0, float(tp / actual) if actual else 0.0


def auc_per_class(scores, labels) -> tuple[dict[int, float], list[int]]:
	"""
	One-vs-rest ROC AUC per class (ties count half).

	Returns:
		(auc by class index, classes skipped for lacking positives or negatives)
	"""
	scores = np.asarray(scores, dtype=np.float64)
	labels = np.asarray(labels, dtype=np.int64)
	if scores.ndim != 2 or scores.shape[0] != labels.size:
		raise ContractError(f"scores {scores.shape} do not match {labels.size} labels")
	aucs: dict[int, float] = {}
	skipped: list[int] = []
	for k in range(scores.shape[1]):
		positive = labels == k
		if positive.all() or not positive.any():
			skipped.append(k)
			continue
		aucs[k] = float(roc_auc_score(positive, scores[:, k]))
	return aucs, skipped


def auc_macro(scores, labels) -> float:
	labels = np.asarray(labels, dtype=np.int64)
	if np.unique(labels).size < 2:
		raise UndefinedMetricError("AUC is undefined when every item has the same label")
	aucs, skipped = auc_per_class(scores, labels)
	if skipped:
		logger.warning("AUC skipped for %d classes without both positives and negatives", len(skipped))
	return float(np.mean(list(aucs.values())))


def per_emotion_report(
	predictions: Sequence[int],
	labels: Sequence[int],
	emotions: Sequence[Emotion],
	expected: Sequence[Emotion] = (),
) -> dict[str, float]:
	"""
	Accuracy (percent) within each emotion, plus ``average`` over the
	emotions present. Expected emotions with no items are omitted with a
	warning.
	"""
	predictions = np.asarray(predictions)
	labels = np.asarray(labels)
	emotions = list(emotions)
	if not len(predictions) == len(labels) == len(emotions):
		raise ContractError("predictions, labels and emotions differ in length")
	present = {e for e in emotions}
	for emotion in expected:
		if emotion not in present:
			logger.warning("no test items for emotion %s; omitted", emotion.value)
	table: dict[str, float] = {}
	tags = np.array([e.value for e in emotions])
	for emotion in Emotion:
		if emotion not in present:
			continue
		mask = tags == emotion.value
		table[emotion.value] = float(100.0 * np.mean(predictions[mask] == labels[mask]))
	if table:
		table[AVERAGE_KEY] = float(np.mean(list(table.values())))
	return table


def build_report(
	manifest: CorpusManifest,
	items: Sequence[int],
	scores: np.ndarray,
	expected: Sequence[Emotion] | None = None,
) -> EvalReport:
	"""
	Assemble an EvalReport from class scores for the given manifest items.

	``expected`` defaults to every emotion in the manifest; any of them with
	no test items is left out of the per-emotion table with a warning.
	"""
	items = list(items)
	if expected is None:
		expected = manifest.emotions
	if not items:
		raise ContractError("no test items to evaluate")
	scores = np.asarray(scores, dtype=np.float64)
	speakers = tuple(manifest.speakers)
	labels = labels_for(manifest, items)
	predictions = predict_classes(scores)
	confusion = confusion_matrix(labels, predictions, len(speakers))
	accuracy, speaker_scores = metrics(confusion)
	if np.unique(labels).size < 2:
		logger.warning("AUC is undefined when every item has the same label")
		auc, skipped = None, list(range(len(speakers)))
	else:
		aucs, skipped = auc_per_class(scores, labels)
		auc = float(np.mean(list(aucs.values())))
	return EvalReport(
		overall_accuracy=accuracy,
		per_emotion_accuracy=per_emotion_report(predictions, labels, [manifest[i].emotion for i in items], expected),
		per_speaker={speaker: score for speaker, score in zip(speakers, speaker_scores)},
		auc_macro=auc,
		confusion=tuple(tuple(int(x) for x in row) for row in confusion),
		n_test_items=len(items),
		speakers=speakers,
		auc_skipped=tuple(speakers[k] for k in skipped),
	)


def score_items(
	model: Model,
	archive: FeatureArchive,
	items: Sequence[int],
	stats: tuple[np.ndarray, np.ndarray] | None,
	*,
	batch_size: int = 64,
	runner: TaskRunner | None = None,
) -> tuple[np.ndarray, float]:
	"""
	Class scores for the given items with a frozen model.

	Returns:
		(scores [len(items) x n_classes], wall-clock seconds per item)
	"""
	runner = runner or get_default_runner()
	items = list(items)
	model.eval()
	batches = [items[i:i + batch_size] for i in range(0, len(items), batch_size)]
	started = time.perf_counter()
	results = runner.map(
		lambda pair: model.scores(archive.stack(pair[1], stats), batch_index=pair[0]),
		list(enumerate(batches)),
	)
	raise_first_failure(results)
	seconds = time.perf_counter() - started
	scores = np.concatenate([r.value for r in results], axis=0) if results else np.zeros((0, model.cfg.n_classes))
	return scores, seconds / max(1, len(items))


def evaluate_model(
	model: Model,
	manifest: CorpusManifest,
	archive: FeatureArchive,
	items: Sequence[int],
	stats: tuple[np.ndarray, np.ndarray] | None,
	*,
	batch_size: int = 64,
	runner: TaskRunner | None = None,
) -> EvalReport:
	scores, per_item = score_items(model, archive, items, stats, batch_size=batch_size, runner=runner)
	report = build_report(manifest, items, scores)
	logger.info(
		"evaluated %d items: accuracy %.2f%%, AUC %s",
		report.n_test_items,
		report.overall_accuracy,
		"n/a" if report.auc_macro is None else f"{report.auc_macro:.4f}",
	)
	return _with_extra(report, inference_seconds_per_item=per_item)


def _with_extra(report: EvalReport, **values: Any) -> EvalReport:
	extra = dict(report.extra)
	extra.update(values)
	return dataclasses.replace(report, extra=extra)


def f1_share(report: EvalReport, threshold: float = 0.9) -> float:
	"""Fraction of speakers whose F1 is at least ``threshold``."""
	if not report.per_speaker:
		raise ContractError("report has no per-speaker scores")
	hits = sum(1 for s in report.per_speaker.values() if s.f1 >= threshold)
	return hits / len(report.per_speaker)


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
	"""
	Trial average: every accuracy, per-speaker score and AUC is the
	arithmetic mean over trials; confusion counts and item counts are summed.
	The per-trial accuracies are kept in ``extra["trial_accuracies"]``, also
	for a single trial.
	"""
	if not reports:
		raise ContractError("no reports to average")
	speakers = reports[0].speakers
	if any(r.speakers != speakers for r in reports):
		raise ContractError("reports cover different speaker sets")
	if len(reports) == 1:
		return _with_extra(reports[0], trial_accuracies=[reports[0].overall_accuracy])
	emotions = [key for key in reports[0].per_emotion_accuracy]
	for r in reports[1:]:
		emotions.extend(key for key in r.per_emotion_accuracy if key not in emotions)
	per_emotion = {}
	for key in emotions:
		values = [r.per_emotion_accuracy[key] for r in reports if key in r.per_emotion_accuracy]
		per_emotion[key] = float(np.mean(values))
	per_speaker = {
		speaker: SpeakerScore(
			float(np.mean([r.per_speaker[speaker].precision for r in reports])),
			float(np.mean([r.per_speaker[speaker].recall for r in reports])),
			float(np.mean([r.per_speaker[speaker].f1 for r in reports])),
		)
		for speaker in speakers
	}
	aucs = [r.auc_macro for r in reports if r.auc_macro is not None]
	confusion = sum(r.confusion_array() for r in reports)
	return EvalReport(
		overall_accuracy=float(np.mean([r.overall_accuracy for r in reports])),
		per_emotion_accuracy=per_emotion,
		per_speaker=per_speaker,
		auc_macro=float(np.mean(aucs)) if aucs else None,
		confusion=tuple(tuple(int(x) for x in row) for row in confusion),
		n_test_items=sum(r.n_test_items for r in reports),
		speakers=speakers,
		auc_skipped=tuple(sorted({s for r in reports for s in r.auc_skipped})),
		n_trials=sum(r.n_trials for r in reports),
		extra={"trial_accuracies": [r.overall_accuracy for r in reports]},
	)


@dataclass(frozen=True)
class NoiseComparison:
	"""Clean and distorted evaluations of the same test items."""

	clean: EvalReport
	distorted: EvalReport
	amplitude_ratio: float
	# test items evaluated without noise because their clip is silent
	unnoised: tuple[int, ...] = ()

	def emotion_rows(self) -> list[tuple[str, float, float]]:
		"""(emotion, normal %, distorted %) rows, ``average`` last."""
		keys = [k for k in self.clean.per_emotion_accuracy if k != AVERAGE_KEY]
		rows = [(k, self.clean.per_emotion_accuracy[k], self.distorted.per_emotion_accuracy.get(k, 0.0)) for k in keys]
		if AVERAGE_KEY in self.clean.per_emotion_accuracy:
			rows.append(
				(
					AVERAGE_KEY,
					self.clean.per_emotion_accuracy[AVERAGE_KEY],
					self.distorted.per_emotion_accuracy.get(AVERAGE_KEY, 0.0),
				)
			)
		return rows
