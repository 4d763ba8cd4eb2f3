"""
Report rendering: canonical JSON plus the CSV tables and confusion images.

Formatters return text (or bytes) and never touch the filesystem; the
``write_*`` helpers do the I/O.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from capsid.core.errors import ContractError
from capsid.corpus.types import Emotion
from capsid.services.evaluator import AVERAGE_KEY, EvalReport, NoiseComparison
from capsid.services.experiments import AblationCell
from capsid.services.stats import PairwiseRow
from capsid.services.trainer import TimingRow

logger = logging.getLogger(__name__)


def _fmt(value: float | None, digits: int = 4) -> str:
	return "" if value is None else f"{value:.{digits}f}"


def report_to_json(report: EvalReport, **meta: Any) -> str:
	payload = report.to_json_dict()
	if meta:
		payload["meta"] = meta
	return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_report_json(path: str | Path, report: EvalReport, **meta: Any) -> Path:
	target = Path(path)
	target.parent.mkdir(parents=True, exist_ok=True)
	target.write_text(report_to_json(report, **meta), encoding="utf-8")
	return target


def load_report_json(path: str | Path) -> EvalReport:
	try:
		data = json.loads(Path(path).read_text(encoding="utf-8"))
	except (OSError, json.JSONDecodeError) as exc:
		raise ContractError(f"cannot read report {path}: {exc}") from exc
	data.pop("meta", None)
	return EvalReport.from_json_dict(data)


def emotion_columns(reports: Sequence[EvalReport]) -> list[str]:
	"""Emotions present in any report, in canonical order, then ``average``."""
	present = {key for r in reports for key in r.per_emotion_accuracy}
	return [e.value for e in Emotion if e.value in present] + [AVERAGE_KEY]


def emotion_table_csv(reports: Mapping[str, EvalReport]) -> str:
	"""One row per system, one column per emotion (accuracy %)."""
	columns = emotion_columns(list(reports.values()))
	lines = [",".join(["model", *columns])]
	for name, report in reports.items():
		cells = [_fmt(report.per_emotion_accuracy.get(c), 2) for c in columns]
		lines.append(",".join([name, *cells]))
	return "\n".join(lines) + "\n"


def noise_table_csv(comparison: NoiseComparison) -> str:
	lines = ["emotion,normal,distorted"]
	for emotion, normal, distorted in comparison.emotion_rows():
		lines.append(f"{emotion},{normal:.2f},{distorted:.2f}")
	return "\n".join(lines) + "\n"


def speaker_table_csv(report: EvalReport) -> str:
	lines = ["speaker,precision,recall,f1"]
	for speaker, score in report.per_speaker.items():
		lines.append(f"{speaker},{score.precision:.4f},{score.recall:.4f},{score.f1:.4f}")
	return "\n".join(lines) + "\n"


def confusion_csv(report: EvalReport) -> str:
	"""Rows are true speakers, columns predicted speakers."""
	lines = [",".join(["true\\predicted", *report.speakers])]
	for speaker, row in zip(report.speakers, report.confusion):
		lines.append(",".join([speaker, *(str(x) for x in row)]))
	return "\n".join(lines) + "\n"


def confusion_pgm(report: EvalReport, cell: int = 8) -> bytes:
	"""
	Binary PGM (P5) of the row-normalised confusion matrix.

	Each cell is ``cell`` x ``cell`` pixels; darker means a larger share of
	that speaker's items.
	"""
	if cell < 1:
		raise ContractError("cell size must be positive")
	counts = report.confusion_array().astype(np.float64)
	totals = counts.sum(axis=1, keepdims=True)
	shares = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
	gray = np.rint(255.0 * (1.0 - shares)).astype(np.uint8)
	image = np.kron(gray, np.ones((cell, cell), dtype=np.uint8))
	height, width = image.shape
	return f"P5\n{width} {height}\n255\n".encode("ascii") + image.tobytes()


def ablation_csv(cells: Sequence[AblationCell]) -> str:
	lines = ["routing_iterations,decoder,test_accuracy,train_accuracy,epochs"]
	for c in cells:
		decoder = "on" if c.decoder else "off"
		lines.append(f"{c.routing_iterations},{decoder},{c.report.overall_accuracy:.2f},{c.train_accuracy:.2f},{c.epochs}")
	return "\n".join(lines) + "\n"


def timing_csv(rows: Sequence[TimingRow]) -> str:
	lines = ["model,epochs,mean_epoch_seconds,total_seconds,total_minutes"]
	for r in rows:
		lines.append(f"{r.model},{r.epochs},{r.mean_epoch_seconds:.4f},{r.total_seconds:.4f},{r.total_minutes:.4f}")
	return "\n".join(lines) + "\n"


def pvalue_csv(rows: Sequence[PairwiseRow]) -> str:
	lines = ["reference,other,statistic,p_value,note"]
	for r in rows:
		lines.append(f"{r.reference},{r.other},{_fmt(r.statistic, 1)},{_fmt(r.p_value, 6)},{r.note}")
	return "\n".join(lines) + "\n"


def write_text(path: str | Path, text: str) -> Path:
	target = Path(path)
	target.parent.mkdir(parents=True, exist_ok=True)
	target.write_text(text, encoding="utf-8")
	logger.debug("wrote %s", target)
	return target


def write_report_bundle(directory: str | Path, report: EvalReport, name: str = "report", **meta: Any) -> list[Path]:
	"""JSON report plus its emotion, speaker and confusion tables under ``directory``."""
	directory = Path(directory)
	written = [
		write_report_json(directory / f"{name}.json", report, **meta),
		write_text(directory / f"{name}_emotions.csv", emotion_table_csv({name: report})),
		write_text(directory / f"{name}_speakers.csv", speaker_table_csv(report)),
		write_text(directory / f"{name}_confusion.csv", confusion_csv(report)),
	]
	pgm = directory / f"{name}_confusion.pgm"
	pgm.write_bytes(confusion_pgm(report))
	written.append(pgm)
	return written
