"""
Multi-run experiments built from train + evaluate: utterance-rotation
trials, the routing/decoder ablation grid and the clean-vs-noisy study.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
import logging
from typing import Callable, Sequence

from capsid.core.errors import CapsidError, DegenerateSignalError, TrialError
from capsid.core.runner import TaskRunner, get_default_runner
from capsid.core.seeding import derive_seed
from capsid.corpus.splits import trial_plans
from capsid.corpus.types import AudioClip, CorpusManifest, SplitPlan, SplitProtocol
from capsid.corpus.wav import load_wav
from capsid.features.archive import FeatureArchive, extract_archive
from capsid.features.mfcc import FeatureConfig
from capsid.features.signal import add_noise
from capsid.models.losses import LossConfig
from capsid.models.networks import Model, ModelConfig, build_model
from capsid.services.evaluator import EvalReport, NoiseComparison, average_reports, evaluate_model
from capsid.services.trainer import TrainConfig, TrainHistory, fold_plans, train

logger = logging.getLogger(__name__)

ROUTING_RANGE = (1, 2, 3, 4, 5)


@dataclass
class TrialOutcome:
	plan: SplitPlan
	model: Model
	report: EvalReport
	history: TrainHistory


@dataclass
class TrialsResult:
	trials: list[TrialOutcome]
	average: EvalReport


def _fit_and_score(
	manifest: CorpusManifest,
	archive: FeatureArchive,
	plan: SplitPlan,
	model_cfg: ModelConfig,
	train_cfg: TrainConfig,
	loss_cfg: LossConfig,
) -> TrialOutcome:
	model = build_model(model_cfg)
	model, history = train(model, manifest, plan, archive, train_cfg, loss_cfg)
	report = evaluate_model(model, manifest, archive, plan.test_items, history.stats, batch_size=train_cfg.batch_size)
	return TrialOutcome(plan, model, report, history)


def experiment_plans(
	manifest: CorpusManifest,
	protocol: SplitProtocol | str,
	train_cfg: TrainConfig,
	**split_kwargs,
) -> list[SplitPlan]:
	"""Trial plans, or fold plans over the first trial's training material when cv_folds is set."""
	if train_cfg.cv_folds:
		first = trial_plans(manifest, protocol, train_cfg.seed, 1, **split_kwargs)[0]
		return fold_plans(manifest, first, train_cfg.cv_folds)
	return trial_plans(manifest, protocol, train_cfg.seed, train_cfg.trials, **split_kwargs)


def run_trials(
	manifest: CorpusManifest,
	archive: FeatureArchive,
	protocol: SplitProtocol | str,
	model_cfg: ModelConfig,
	train_cfg: TrainConfig = TrainConfig(),
	loss_cfg: LossConfig = LossConfig(),
	*,
	runner: TaskRunner | None = None,
	plans: Sequence[SplitPlan] | None = None,
	on_trial: Callable[[TrialOutcome], None] | None = None,
	**split_kwargs,
) -> TrialsResult:
	"""
	Train and evaluate one model per trial, then average the reports.

	Trial k draws its training utterances with seed ``train_cfg.seed + k``
	and initialises its model from ``model_cfg.seed + k``.

	Raises:
		TrialError: Wrapping the first failing trial's error as ``trial <k>``.
	"""
	runner = runner or get_default_runner()
	if plans is None:
		plans = experiment_plans(manifest, protocol, train_cfg, **split_kwargs)

	def _one(plan: SplitPlan) -> TrialOutcome:
		cfg = dataclasses.replace(model_cfg, seed=model_cfg.seed + plan.trial_index)
		logger.info("trial %d: training on utterances %s", plan.trial_index, ", ".join(plan.train_utterances))
		return _fit_and_score(manifest, archive, plan, cfg, train_cfg, loss_cfg)

	results = runner.map(_one, list(plans))
	outcomes: list[TrialOutcome] = []
	for plan, result in zip(plans, results):
		if not result.ok:
			raise TrialError(f"trial {plan.trial_index}", result.exception or RuntimeError(result.error))
		outcomes.append(result.value)
		if on_trial is not None:
			on_trial(result.value)
	average = average_reports([o.report for o in outcomes])
	logger.info("%d trials: mean accuracy %.2f%%", len(outcomes), average.overall_accuracy)
	return TrialsResult(outcomes, average)


@dataclass(frozen=True)
class AblationCell:
	routing_iterations: int
	decoder: bool
	report: EvalReport
	train_accuracy: float
	epochs: int

	@property
	def key(self) -> tuple[int, bool]:
		return (self.routing_iterations, self.decoder)


def ablation_grid(
	manifest: CorpusManifest,
	archive: FeatureArchive,
	plan: SplitPlan,
	model_cfg: ModelConfig,
	train_cfg: TrainConfig = TrainConfig(),
	loss_cfg: LossConfig = LossConfig(),
	*,
	runner: TaskRunner | None = None,
	routings: Sequence[int] = ROUTING_RANGE,
) -> list[AblationCell]:
	"""
	Train and evaluate every (routing iterations, decoder on/off) cell on the
	same split with the same seed. Cells come back ordered by r, decoder on first.

	Raises:
		TrialError: Naming the failing cell, e.g. ``cell r=3 decoder=off``.
	"""
	runner = runner or get_default_runner()
	if not model_cfg.arch.is_capsule:
		raise TrialError("ablation", ValueError(f"{model_cfg.architecture} has no routing to ablate"))
	cells = [(r, decoder) for r in routings for decoder in (True, False)]

	def _one(cell: tuple[int, bool]) -> AblationCell:
		r, decoder = cell
		cfg = dataclasses.replace(model_cfg, routing_iterations=r, decoder_enabled=decoder)
		outcome = _fit_and_score(manifest, archive, plan, cfg, train_cfg, loss_cfg)
		best = outcome.history.records[outcome.history.best_epoch - 1]
		return AblationCell(r, decoder, outcome.report, best.train_acc, outcome.history.epochs)

	results = runner.map(_one, cells)
	out = []
	for (r, decoder), result in zip(cells, results):
		if not result.ok:
			where = f"cell r={r} decoder={'on' if decoder else 'off'}"
			raise TrialError(where, result.exception or RuntimeError(result.error))
		cell = result.value
		logger.info(
			"r=%d decoder=%s: test %.2f%%, train %.2f%%",
			r,
			"on" if decoder else "off",
			cell.report.overall_accuracy,
			cell.train_accuracy,
		)
		out.append(cell)
	return out


def noise_eval(
	model: Model,
	manifest: CorpusManifest,
	plan: SplitPlan,
	feature_cfg: FeatureConfig,
	amplitude_ratio: float,
	seed: int,
	stats,
	*,
	clips: Sequence[AudioClip] | None = None,
	loader: Callable[[str], AudioClip] = load_wav,
	runner: TaskRunner | None = None,
	batch_size: int = 64,
) -> NoiseComparison:
	"""
	Evaluate the plan's test items twice: as recorded and with white noise
	at ``amplitude_ratio`` (speech RMS : noise RMS). Item i gets noise seed
	``derive_seed(seed, "noise", i)``. A silent clip cannot be scaled against, so
	it is evaluated as recorded in both passes and listed in ``unnoised``.
	"""
	runner = runner or get_default_runner()
	items = list(plan.test_items)
	if clips is None:
		loaded = runner.map(lambda i: loader(manifest[i].path), items)
		cache = {}
		for index, result in zip(items, loaded):
			if not result.ok:
				raise result.exception or CapsidError(result.error)
			cache[index] = result.value
		clip_for = cache.__getitem__
	else:
		clip_for = clips.__getitem__

	unnoised: list[int] = []

	def _noisy(index: int) -> AudioClip:
		clip = clip_for(index)
		try:
			return add_noise(clip, amplitude_ratio, derive_seed(seed, "noise", index))
		except DegenerateSignalError as exc:
			logger.warning("%s: %s; evaluating it without noise", manifest[index].path, exc)
			unnoised.append(index)
			return clip

	clean_archive, _ = extract_archive(manifest, feature_cfg, items=items, source=clip_for, runner=runner)
	noisy_archive, _ = extract_archive(manifest, feature_cfg, items=items, source=_noisy, runner=runner)
	clean = evaluate_model(model, manifest, clean_archive, items, stats, batch_size=batch_size, runner=runner)
	distorted = evaluate_model(model, manifest, noisy_archive, items, stats, batch_size=batch_size, runner=runner)
	if distorted.overall_accuracy > clean.overall_accuracy:
		logger.warning(
			"distorted accuracy %.2f%% exceeds clean %.2f%% at ratio %g",
			distorted.overall_accuracy,
			clean.overall_accuracy,
			amplitude_ratio,
		)
	return NoiseComparison(clean, distorted, float(amplitude_ratio), tuple(sorted(unnoised)))
