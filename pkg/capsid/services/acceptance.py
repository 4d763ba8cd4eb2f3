"""
Desk-scale learning check on the synthetic corpus.

Trains the capsule network on the 8 x 8 x 9 x 6 synthetic corpus with the
ESD-style split, then the baseline CNN on the same plans, and compares the
capsule scores against fixed accuracy and wall-clock targets.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
import logging
import time
from typing import Sequence

from capsid.core.runner import TaskRunner, get_default_runner
from capsid.corpus.synthetic import generate_synthetic_corpus
from capsid.corpus.types import ACTED_EMOTIONS, Emotion
from capsid.features.archive import extract_archive
from capsid.features.mfcc import FeatureConfig
from capsid.models.losses import LossConfig
from capsid.models.networks import Architecture, ModelConfig
from capsid.services.evaluator import EvalReport
from capsid.services.experiments import experiment_plans, run_trials
from capsid.services.trainer import CAPSULE_EPOCHS, TrainConfig

logger = logging.getLogger(__name__)

DESK_SPEAKERS = 8
DESK_UTTERANCES = 8
DESK_REPS = 9
DESK_SEED = 7
NEUTRAL_TARGET = 95.0
OVERALL_TARGET = 80.0
BUDGET_SECONDS = 30 * 60.0


@dataclass(frozen=True)
class DeskCheck:
	capsule: EvalReport
	cnn: EvalReport | None
	capsule_seconds: float
	total_seconds: float
	neutral_target: float = NEUTRAL_TARGET
	overall_target: float = OVERALL_TARGET
	budget_seconds: float = BUDGET_SECONDS

	@property
	def neutral_accuracy(self) -> float:
		return self.capsule.per_emotion_accuracy.get(Emotion.NEUTRAL.value, 0.0)

	@property
	def accuracy_met(self) -> bool:
		return self.neutral_accuracy >= self.neutral_target and self.capsule.overall_accuracy >= self.overall_target

	@property
	def within_budget(self) -> bool:
		return self.total_seconds <= self.budget_seconds

	def summary_lines(self) -> list[str]:
		lines = [
			f"capsule neutral {self.neutral_accuracy:.2f}% (target {self.neutral_target:g}%)",
			f"capsule overall {self.capsule.overall_accuracy:.2f}% (target {self.overall_target:g}%)",
		]
		if self.cnn is not None:
			lines.append(f"baseline cnn overall {self.cnn.overall_accuracy:.2f}%")
		lines.append(
			f"wall clock {self.total_seconds / 60:.1f} min, capsule {self.capsule_seconds / 60:.1f} min "
			f"(budget {self.budget_seconds / 60:g} min)"
		)
		return lines


def desk_check(
	model_cfg: ModelConfig = ModelConfig(),
	cnn_cfg: ModelConfig | None = ModelConfig(architecture=Architecture.BASELINE_CNN.value),
	train_cfg: TrainConfig = TrainConfig(max_epochs=CAPSULE_EPOCHS, trials=1),
	feature_cfg: FeatureConfig = FeatureConfig(),
	loss_cfg: LossConfig = LossConfig(),
	*,
	n_speakers: int = DESK_SPEAKERS,
	n_utterances: int = DESK_UTTERANCES,
	n_reps: int = DESK_REPS,
	emotions: Sequence[Emotion] = ACTED_EMOTIONS,
	seed: int = DESK_SEED,
	runner: TaskRunner | None = None,
	**split_kwargs,
) -> DeskCheck:
	"""
	Run the desk-scale check end to end in memory.

	Both models get ``n_classes`` set to the corpus speaker count and train on
	the same ESD-style plans. ``cnn_cfg=None`` skips the baseline.

	Raises:
		TrialError: A trial failed; a diverging CNN surfaces here too.
	"""
	runner = runner or get_default_runner()
	started = time.perf_counter()
	manifest, clips = generate_synthetic_corpus(n_speakers, n_utterances, n_reps, seed, tuple(emotions))
	archive, _ = extract_archive(manifest, feature_cfg, clips=clips, runner=runner)
	plans = experiment_plans(manifest, "esd_style", train_cfg, **split_kwargs)
	logger.info("desk check: %d clips, %d trial(s)", len(manifest), len(plans))

	capsule_started = time.perf_counter()
	capsule = run_trials(
		manifest,
		archive,
		"esd_style",
		dataclasses.replace(model_cfg, n_classes=n_speakers),
		train_cfg,
		loss_cfg,
		runner=runner,
		plans=plans,
	)
	capsule_seconds = time.perf_counter() - capsule_started

	cnn_report = None
	if cnn_cfg is not None:
		cnn = run_trials(
			manifest,
			archive,
			"esd_style",
			dataclasses.replace(cnn_cfg, n_classes=n_speakers),
			train_cfg,
			loss_cfg,
			runner=runner,
			plans=plans,
		)
		cnn_report = cnn.average

	check = DeskCheck(capsule.average, cnn_report, capsule_seconds, time.perf_counter() - started)
	for line in check.summary_lines():
		logger.info("desk check: %s", line)
	if not check.within_budget:
		logger.warning("desk check took %.1f min, over the %g min budget", check.total_seconds / 60, check.budget_seconds / 60)
	return check
