"""
Command implementations behind the CLI.

Each ``cmd_*`` takes a resolved RunConfig, does its work under
``<out>/<run_id>/``, writes ``run.json`` there and returns a small result
object for the caller to summarise. Failures raise CapsidError subclasses.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from capsid.autodiff.checkpoint import load_checkpoint, save_checkpoint
from capsid.core.config import apply_overrides, load_config_file, to_flat_dict
from capsid.core.errors import ConfigError, ContractError
from capsid.core.runner import TaskRunner, get_runner
from capsid.corpus.manifest import load_manifest_csv, write_manifest_csv
from capsid.corpus.splits import load_split_plan, save_split_plan
from capsid.corpus.synthetic import generate_synthetic_corpus
from capsid.corpus.types import ACTED_EMOTIONS, CorpusKind, CorpusManifest, Emotion, SplitProtocol
from capsid.corpus.wav import write_wav
from capsid.features.archive import FeatureArchive, extract_archive, load_archive, save_archive
from capsid.features.mfcc import FeatureConfig
from capsid.models.losses import LossConfig
from capsid.models.networks import ModelConfig, geometry, load_model, save_model
from capsid.services import reports
from capsid.services.evaluator import EvalReport, NoiseComparison, evaluate_model, f1_share
from capsid.services.experiments import AblationCell, TrialOutcome, TrialsResult, ablation_grid, experiment_plans, noise_eval, run_trials
from capsid.services.stats import PairwiseRow, pairwise_wilcoxon
from capsid.services.trainer import TimingRow, TrainConfig, timing_report, write_history_csv

logger = logging.getLogger(__name__)

RUN_FILE = "run.json"
STATS_NAME = "stats.capw"
SPLIT_NAME = "split.json"
ARCHIVE_NAME = "features.capf"
SECTIONS = ("features", "model", "loss", "train", "run")


@dataclass(frozen=True)
class RunOptions:
	"""The ``run`` section: paths, protocol selection and the global seed."""

	seed: int = 0
	protocol: str = SplitProtocol.ESD_STYLE.value
	manifest: str | None = None
	corpus_kind: str = CorpusKind.GENERIC.value
	archive: str | None = None
	out: str = "runs"
	run_id: str | None = None
	workers: int = 1
	skip_errors: bool = False
	train_utterances: int | None = None
	train_statement: str = "01"
	noise_ratio: float = 2.0
	speakers: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunConfig:
	features: FeatureConfig = field(default_factory=FeatureConfig)
	model: ModelConfig = field(default_factory=ModelConfig)
	loss: LossConfig = field(default_factory=LossConfig)
	train: TrainConfig = field(default_factory=TrainConfig)
	run: RunOptions = field(default_factory=RunOptions)

	@classmethod
	def resolve(cls, *layers: Mapping[str, Mapping[str, Any]]) -> RunConfig:
		"""
		Apply ``{section: {key: value}}`` layers over the defaults, later
		layers shadowing earlier ones, then derive the linked fields.

		Raises:
			ConfigError: Listing every unknown key, bad value and violated field.
		"""
		cfg = cls()
		violations: list[str] = []
		for layer in layers:
			for section, values in layer.items():
				if section not in SECTIONS:
					violations.append(f"{section}: unknown section (expected one of {', '.join(SECTIONS)})")
					continue
				updated, problems = apply_overrides(getattr(cfg, section), values, section=section)
				violations.extend(problems)
				cfg = dataclasses.replace(cfg, **{section: updated})
		cfg = cfg.linked()
		violations.extend(cfg.validate())
		if violations:
			raise ConfigError(violations)
		return cfg

	def linked(self) -> RunConfig:
		"""Copy with model geometry taken from the features and seeds from ``run.seed``."""
		model = dataclasses.replace(
			self.model,
			n_features=self.features.n_features,
			target_frames=self.features.target_frames,
			seed=self.run.seed,
		)
		train = dataclasses.replace(self.train, seed=self.run.seed)
		return dataclasses.replace(self, model=model, train=train)

	def validate(self, require: Sequence[str] = ()) -> list[str]:
		"""
		Every violated field across all sections.

		Args:
			require: ``run`` path fields that must name an existing file.
		"""
		problems = self.features.validate() + self.loss.validate() + self.train.validate()
		model_problems = self.model.validate()
		if not model_problems:
			try:
				geometry(self.model)
			except ConfigError as exc:
				model_problems = [f"model.layers: {v}" for v in exc.violations]
		problems += model_problems
		run = self.run
		try:
			SplitProtocol(run.protocol)
		except ValueError:
			problems.append(f"run.protocol: {run.protocol!r} is not one of {', '.join(p.value for p in SplitProtocol)}")
		try:
			CorpusKind(run.corpus_kind)
		except ValueError:
			problems.append(f"run.corpus_kind: {run.corpus_kind!r} is not one of {', '.join(k.value for k in CorpusKind)}")
		if run.workers < 1:
			problems.append(f"run.workers: must be >= 1, got {run.workers}")
		if not run.noise_ratio > 0:
			problems.append(f"run.noise_ratio: must be > 0, got {run.noise_ratio}")
		for name in require:
			value = getattr(run, name)
			if value is None:
				problems.append(f"run.{name}: required")
			elif not Path(value).exists():
				problems.append(f"run.{name}: {value} does not exist")
		return problems

	def require(self, *names: str) -> None:
		problems = self.validate(names)
		if problems:
			raise ConfigError(problems)

	def to_json_dict(self) -> dict[str, Any]:
		return {section: to_flat_dict(getattr(self, section)) for section in SECTIONS}

	def run_dir(self, command: str) -> Path:
		run_id = self.run.run_id or f"{command}-seed{self.run.seed}"
		return Path(self.run.out) / run_id

	def runner(self) -> TaskRunner:
		return get_runner(self.run.workers)


def load_config_layers(path: str | Path) -> dict[str, dict[str, Any]]:
	"""
	Sections from a ``section.key = value`` file, or from a previous
	``run.json`` so a run can be repeated exactly.
	"""
	path = Path(path)
	if path.suffix != ".json":
		return load_config_file(path)
	try:
		data = json.loads(path.read_text(encoding="utf-8"))
	except (OSError, json.JSONDecodeError) as exc:
		raise ConfigError(f"cannot read config {path}: {exc}") from exc
	sections = data.get("config", data)
	if not isinstance(sections, dict):
		raise ConfigError(f"{path}: no config object")
	return {name: dict(values) for name, values in sections.items()}


def write_run_file(directory: Path, command: str, cfg: RunConfig, **details: Any) -> Path:
	directory.mkdir(parents=True, exist_ok=True)
	payload = {"command": command, "seed": cfg.run.seed, "config": cfg.to_json_dict(), "details": details}
	target = directory / RUN_FILE
	target.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
	return target


def save_stats(directory: Path, stats: tuple[np.ndarray, np.ndarray]) -> Path:
	return save_checkpoint(directory / STATS_NAME, {"mean": stats[0], "std": stats[1]})


def load_stats(directory: str | Path) -> tuple[np.ndarray, np.ndarray]:
	tensors = load_checkpoint(Path(directory) / STATS_NAME)
	try:
		return tensors["mean"], tensors["std"]
	except KeyError as exc:
		raise ContractError(f"{directory}/{STATS_NAME} lacks {exc}") from exc


@dataclass
class Corpus:
	manifest: CorpusManifest
	archive: FeatureArchive


def load_corpus(cfg: RunConfig) -> Corpus:
	"""Manifest plus features: the saved archive if configured, else extracted now."""
	cfg.require("manifest")
	manifest = load_manifest_csv(cfg.run.manifest, CorpusKind(cfg.run.corpus_kind))
	if cfg.run.archive is not None:
		cfg.require("archive")
		archive = load_archive(cfg.run.archive)
	else:
		archive, _ = extract_archive(manifest, cfg.features, runner=cfg.runner(), skip_errors=cfg.run.skip_errors)
	if cfg.run.speakers:
		unknown = sorted(set(cfg.run.speakers) - set(manifest.speakers))
		if unknown:
			raise ConfigError(f"run.speakers: not in the manifest: {unknown}")
		manifest, kept = manifest.subset(cfg.run.speakers)
		present = [k for k, old in enumerate(kept) if old in archive]
		manifest = CorpusManifest(tuple(manifest[k] for k in present), manifest.corpus_kind)
		archive = archive.select([kept[k] for k in present])
	else:
		kept = [i for i in range(len(manifest)) if i in archive]
		if len(kept) < len(manifest):
			logger.warning("%d manifest items have no features and are left out", len(manifest) - len(kept))
			manifest = CorpusManifest(tuple(manifest[i] for i in kept), manifest.corpus_kind)
			archive = archive.select(kept)
	for index, entry in zip(archive.manifest_indices, archive.entries):
		if entry.key != manifest[index].key:
			raise ContractError(f"archive record for item {index} does not match the manifest ({entry.path})")
	return Corpus(manifest, archive)


def _model_cfg(cfg: RunConfig, manifest: CorpusManifest) -> ModelConfig:
	return dataclasses.replace(cfg.model, n_classes=len(manifest.speakers))


def _split_kwargs(cfg: RunConfig) -> dict[str, Any]:
	kwargs: dict[str, Any] = {"train_statement": cfg.run.train_statement}
	if cfg.run.train_utterances is not None:
		kwargs["train_utterances"] = cfg.run.train_utterances
	return kwargs


@dataclass(frozen=True)
class ExtractResult:
	archive_path: Path
	records: int
	skipped: list[tuple[int, str]]


def cmd_extract(cfg: RunConfig) -> ExtractResult:
	cfg.require("manifest")
	manifest = load_manifest_csv(cfg.run.manifest, CorpusKind(cfg.run.corpus_kind))
	archive, skipped = extract_archive(manifest, cfg.features, runner=cfg.runner(), skip_errors=cfg.run.skip_errors)
	directory = cfg.run_dir("extract")
	target = Path(cfg.run.archive) if cfg.run.archive else directory / ARCHIVE_NAME
	save_archive(target, archive)
	write_run_file(directory, "extract", cfg, archive=str(target), records=len(archive), skipped=skipped)
	logger.info("extract: %d records, %d skipped -> %s", len(archive), len(skipped), target)
	return ExtractResult(target, len(archive), skipped)


@dataclass(frozen=True)
class SynthResult:
	manifest_path: Path
	clips: int


def cmd_synth(
	cfg: RunConfig,
	n_speakers: int = 8,
	n_utterances: int = 8,
	n_reps: int = 9,
	emotions: Sequence[Emotion] = ACTED_EMOTIONS,
) -> SynthResult:
	"""Generate the synthetic corpus and write it as WAVs plus a manifest CSV."""
	directory = cfg.run_dir("synth")
	manifest, clips = generate_synthetic_corpus(n_speakers, n_utterances, n_reps, cfg.run.seed, tuple(emotions))
	results = cfg.runner().map(lambda pair: write_wav(directory / pair[0].path, pair[1]), list(zip(manifest.entries, clips)))
	failed = [r for r in results if not r.ok]
	if failed:
		raise failed[0].exception or ContractError(failed[0].error)
	on_disk = CorpusManifest(
		tuple(dataclasses.replace(e, path=str(directory / e.path)) for e in manifest.entries),
		manifest.corpus_kind,
	)
	target = directory / "manifest.csv"
	write_manifest_csv(target, on_disk)
	write_run_file(
		directory,
		"synth",
		cfg,
		speakers=n_speakers,
		utterances=n_utterances,
		reps=n_reps,
		emotions=[e.value for e in emotions],
	)
	logger.info("synth: %d clips -> %s", len(clips), target)
	return SynthResult(target, len(clips))


def save_trial(directory: Path, outcome: TrialOutcome) -> Path:
	"""``trial<k>/`` with best.capw, config.json, stats.capw, split.json, history.csv and the report tables."""
	trial_dir = directory / f"trial{outcome.plan.trial_index}"
	save_model(outcome.model, trial_dir)
	save_stats(trial_dir, outcome.history.stats)
	save_split_plan(trial_dir / SPLIT_NAME, outcome.plan)
	write_history_csv(trial_dir / "history.csv", outcome.history)
	reports.write_report_bundle(trial_dir, outcome.report, best_epoch=outcome.history.best_epoch)
	return trial_dir


def cmd_train(cfg: RunConfig) -> TrialsResult:
	corpus = load_corpus(cfg)
	directory = cfg.run_dir("train")
	model_cfg = _model_cfg(cfg, corpus.manifest)
	result = run_trials(
		corpus.manifest,
		corpus.archive,
		cfg.run.protocol,
		model_cfg,
		cfg.train,
		cfg.loss,
		runner=cfg.runner(),
		on_trial=lambda outcome: save_trial(directory, outcome),
		**_split_kwargs(cfg),
	)
	rows = timing_report({f"trial{o.plan.trial_index}": o.history for o in result.trials})
	reports.write_text(directory / "timing.csv", reports.timing_csv(rows))
	epochs = float(np.mean([r.epochs for r in rows]))
	seconds = float(np.mean([r.mean_epoch_seconds for r in rows]))
	average = dataclasses.replace(
		result.average,
		extra={**result.average.extra, "architecture": model_cfg.architecture, "epochs": epochs, "mean_epoch_seconds": seconds},
	)
	result = TrialsResult(result.trials, average)
	reports.write_report_bundle(directory, average, name="average", seed=cfg.run.seed, f1_share_090=f1_share(average))
	write_run_file(directory, "train", cfg, trials=[f"trial{o.plan.trial_index}" for o in result.trials])
	logger.info("train: mean accuracy %.2f%% over %d trials -> %s", average.overall_accuracy, len(result.trials), directory)
	return result


@dataclass(frozen=True)
class EvalResult:
	report: EvalReport
	noise: NoiseComparison | None = None


def _load_trial(model_dir: str | Path, split_path: str | Path | None):
	model_dir = Path(model_dir)
	model = load_model(model_dir)
	stats = load_stats(model_dir)
	plan = load_split_plan(split_path or model_dir / SPLIT_NAME)
	return model, stats, plan


def cmd_eval(
	cfg: RunConfig,
	model_dir: str | Path,
	split_path: str | Path | None = None,
	noise_ratio: float | None = None,
) -> EvalResult:
	"""Re-score a saved trial on its test items; with ``noise_ratio`` also run the noisy comparison."""
	corpus = load_corpus(cfg)
	model, stats, plan = _load_trial(model_dir, split_path)
	if model.cfg.n_classes != len(corpus.manifest.speakers):
		raise ContractError(f"model has {model.cfg.n_classes} classes, corpus has {len(corpus.manifest.speakers)} speakers")
	directory = cfg.run_dir("eval")
	report = evaluate_model(model, corpus.manifest, corpus.archive, plan.test_items, stats, runner=cfg.runner())
	reports.write_report_bundle(directory, report, seed=cfg.run.seed, model_dir=str(model_dir))
	noise = None
	if noise_ratio is not None:
		noise = _noise(cfg, corpus, model, stats, plan, noise_ratio, directory)
	write_run_file(directory, "eval", cfg, model_dir=str(model_dir), noise_ratio=noise_ratio)
	return EvalResult(report, noise)


def _noise(cfg: RunConfig, corpus: Corpus, model, stats, plan, ratio: float, directory: Path) -> NoiseComparison:
	comparison = noise_eval(model, corpus.manifest, plan, cfg.features, ratio, cfg.run.seed, stats, runner=cfg.runner())
	reports.write_text(directory / "noise.csv", reports.noise_table_csv(comparison))
	reports.write_report_bundle(directory, comparison.clean, name="clean", noise_ratio=ratio)
	reports.write_report_bundle(
		directory, comparison.distorted, name="distorted", noise_ratio=ratio, unnoised=list(comparison.unnoised)
	)
	return comparison


def cmd_noise(cfg: RunConfig, model_dir: str | Path, split_path: str | Path | None = None) -> NoiseComparison:
	corpus = load_corpus(cfg)
	model, stats, plan = _load_trial(model_dir, split_path)
	directory = cfg.run_dir("noise")
	comparison = _noise(cfg, corpus, model, stats, plan, cfg.run.noise_ratio, directory)
	write_run_file(directory, "noise", cfg, model_dir=str(model_dir))
	return comparison


def cmd_ablate(cfg: RunConfig) -> list[AblationCell]:
	corpus = load_corpus(cfg)
	directory = cfg.run_dir("ablate")
	train_cfg = dataclasses.replace(cfg.train, trials=1, cv_folds=0)
	plan = experiment_plans(corpus.manifest, cfg.run.protocol, train_cfg, **_split_kwargs(cfg))[0]
	save_split_plan(directory / SPLIT_NAME, plan)
	cells = ablation_grid(
		corpus.manifest,
		corpus.archive,
		plan,
		_model_cfg(cfg, corpus.manifest),
		cfg.train,
		cfg.loss,
		runner=cfg.runner(),
	)
	reports.write_text(directory / "ablation.csv", reports.ablation_csv(cells))
	for cell in cells:
		name = f"r{cell.routing_iterations}_{'on' if cell.decoder else 'off'}"
		reports.write_report_json(directory / "cells" / f"{name}.json", cell.report)
	write_run_file(directory, "ablate", cfg, cells=len(cells))
	return cells


@dataclass(frozen=True)
class ReportResult:
	emotion_table: str
	pvalues: list[PairwiseRow]
	timing: list[TimingRow]


def cmd_report(
	cfg: RunConfig,
	report_paths: Sequence[str | Path],
	names: Sequence[str] = (),
	reference: str | None = None,
	alternative: str = "two-sided",
) -> ReportResult:
	"""
	Re-render tables from saved report JSON files. With two or more
	reports, test the reference system's per-trial accuracies against each
	other system's.
	"""
	if not report_paths:
		raise ConfigError("report: give at least one report JSON")
	if names and len(names) != len(report_paths):
		raise ConfigError(f"report: {len(names)} names for {len(report_paths)} reports")
	labels = list(names) or [Path(p).parent.name or Path(p).stem for p in report_paths]
	if len(set(labels)) != len(labels):
		labels = [f"{label}#{k}" for k, label in enumerate(labels)]
	loaded = {label: reports.load_report_json(path) for label, path in zip(labels, report_paths)}
	directory = cfg.run_dir("report")
	table = reports.emotion_table_csv(loaded)
	reports.write_text(directory / "emotions.csv", table)
	pvalues: list[PairwiseRow] = []
	if len(loaded) >= 2:
		scores = {label: r.extra.get("trial_accuracies", [r.overall_accuracy]) for label, r in loaded.items()}
		pvalues = pairwise_wilcoxon(scores, reference or labels[0], alternative)
		reports.write_text(directory / "pvalues.csv", reports.pvalue_csv(pvalues))
	timing = [
		TimingRow(label, int(round(r.extra["epochs"])), r.extra["mean_epoch_seconds"], r.extra["epochs"] * r.extra["mean_epoch_seconds"])
		for label, r in loaded.items()
		if "epochs" in r.extra and "mean_epoch_seconds" in r.extra
	]
	if timing:
		reports.write_text(directory / "timing.csv", reports.timing_csv(timing))
	write_run_file(directory, "report", cfg, reports=[str(p) for p in report_paths], names=labels)
	return ReportResult(table, pvalues, timing)
