import json

import pytest

from capsid.core.errors import ContractError
from capsid.services import reports
from capsid.services.evaluator import AVERAGE_KEY, EvalReport, NoiseComparison, SpeakerScore
from capsid.services.experiments import AblationCell
from capsid.services.stats import pairwise_wilcoxon
from capsid.services.trainer import TimingRow


def _report(accuracy=75.0, emotions=None, confusion=((3, 1), (1, 3))):
	return EvalReport(
		overall_accuracy=accuracy,
		per_emotion_accuracy=emotions or {"angry": 50.0, "neutral": 100.0, AVERAGE_KEY: 75.0},
		per_speaker={"spk00": SpeakerScore(0.75, 0.75, 0.75), "spk01": SpeakerScore(0.75, 0.75, 0.75)},
		auc_macro=0.8,
		confusion=confusion,
		n_test_items=8,
		speakers=("spk00", "spk01"),
	)


def test_emotion_table_uses_canonical_order():
	other = _report(emotions={"sad": 40.0, AVERAGE_KEY: 40.0})
	table = reports.emotion_table_csv({"capsnet_m": _report(), "baseline_cnn": other})
	lines = table.splitlines()
	assert lines[0] == "model,neutral,sad,angry,average"
	assert lines[1] == "capsnet_m,100.00,,50.00,75.00"
	assert lines[2] == "baseline_cnn,,40.00,,40.00"


def test_speaker_and_confusion_tables():
	report = _report()
	assert reports.speaker_table_csv(report).splitlines() == [
		"speaker,precision,recall,f1",
		"spk00,0.7500,0.7500,0.7500",
		"spk01,0.7500,0.7500,0.7500",
	]
	assert reports.confusion_csv(report).splitlines() == ["true\\predicted,spk00,spk01", "spk00,3,1", "spk01,1,3"]


def test_confusion_pgm_layout():
	image = reports.confusion_pgm(_report())
	header = b"P5\n16 16\n255\n"
	assert image.startswith(header)
	pixels = image[len(header):]
	assert len(pixels) == 256
	# row-normalised 3/4 on the diagonal -> 64, 1/4 off it -> 191
	assert pixels[0] == 64 and pixels[8] == 191
	assert len(reports.confusion_pgm(_report(), cell=1)) == len(b"P5\n2 2\n255\n") + 4
	with pytest.raises(ContractError):
		reports.confusion_pgm(_report(), cell=0)


def test_empty_confusion_row_is_white():
	image = reports.confusion_pgm(_report(confusion=((0, 0), (0, 4))), cell=1)
	assert image[-4:] == bytes([255, 255, 255, 0])


def test_noise_table():
	clean = _report()
	noisy = _report(60.0, emotions={"neutral": 70.0, "angry": 50.0, AVERAGE_KEY: 60.0})
	lines = reports.noise_table_csv(NoiseComparison(clean, noisy, 2.0)).splitlines()
	assert lines[0] == "emotion,normal,distorted"
	assert lines[-1] == "average,75.00,60.00"


def test_ablation_timing_and_pvalue_tables():
	cells = [AblationCell(1, True, _report(), 90.0, 3), AblationCell(1, False, _report(50.0), 80.5, 2)]
	assert reports.ablation_csv(cells).splitlines()[1:] == ["1,on,75.00,90.00,3", "1,off,50.00,80.50,2"]
	timing = reports.timing_csv([TimingRow("capsnet_m", 2, 1.5, 3.0)])
	assert timing.splitlines() == [
		"model,epochs,mean_epoch_seconds,total_seconds,total_minutes",
		"capsnet_m,2,1.5000,3.0000,0.0500",
	]
	rows = pairwise_wilcoxon({"a": [90, 91, 92, 93, 94], "b": [80, 81, 82, 83, 84], "c": [90, 91, 92, 93, 94]}, "a")
	lines = reports.pvalue_csv(rows).splitlines()
	assert lines[0] == "reference,other,statistic,p_value,note"
	assert lines[1] == "a,b,0.0,0.062500,"
	assert lines[2].startswith("a,c,,,")


def test_report_json_meta_is_dropped_on_load(tmp_path):
	report = _report()
	path = reports.write_report_json(tmp_path / "nested" / "r.json", report, seed=4)
	assert json.loads(path.read_text())["meta"] == {"seed": 4}
	assert reports.load_report_json(path) == report


def test_load_report_json_errors(tmp_path):
	with pytest.raises(ContractError):
		reports.load_report_json(tmp_path / "missing.json")
	bad = tmp_path / "bad.json"
	bad.write_text("{not json")
	with pytest.raises(ContractError):
		reports.load_report_json(bad)


def test_report_bundle_files(tmp_path):
	written = reports.write_report_bundle(tmp_path / "out", _report(), name="average", trial=0)
	assert [p.name for p in written] == [
		"average.json",
		"average_emotions.csv",
		"average_speakers.csv",
		"average_confusion.csv",
		"average_confusion.pgm",
	]
	assert all(p.exists() for p in written)
	assert written[1].read_text().startswith("model,neutral,angry,average\naverage,")
