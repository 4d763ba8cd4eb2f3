import numpy as np
import pytest

from capsid.core.errors import ContractError, ManifestError
from capsid.features.archive import (
	SIDECAR_HEADER,
	FeatureArchive,
	ReadRecorder,
	decode_records,
	encode_record,
	extract_archive,
	load_archive,
	save_archive,
)
from capsid.features.mfcc import FeatureConfig, FeatureMatrix, standardization_stats


@pytest.fixture
def tiny_clips(tiny_manifest, make_clip):
	return [make_clip(rate=8000, seconds=0.2, freq=200 + 25 * k) for k in range(len(tiny_manifest))]


@pytest.fixture
def tiny_archive(tiny_manifest, tiny_clips, micro_features):
	archive, skipped = extract_archive(tiny_manifest, micro_features, clips=tiny_clips)
	assert skipped == []
	return archive


def test_record_encoding_rounds_to_float32():
	values = np.array([[0.1, -2.5, 3.0], [1e-3, 0.0, 7.25]])
	payload = encode_record(FeatureMatrix(values, 2))
	assert payload[:4] == b"CAPF"
	assert len(payload) == 20 + 6 * 4
	(decoded,) = decode_records(payload)
	assert decoded.n_valid_frames == 2
	assert np.array_equal(decoded.values, values.astype(np.float32).astype(np.float64))


def test_decode_rejects_bad_magic_and_truncation():
	payload = encode_record(FeatureMatrix(np.ones((2, 2)), 2))
	with pytest.raises(ContractError, match="magic"):
		decode_records(b"XXXX" + payload[4:])
	with pytest.raises(ContractError, match="truncated"):
		decode_records(payload[:-1])
	with pytest.raises(ContractError, match="truncated"):
		decode_records(payload + payload[:10])


def test_extract_preserves_manifest_order(tiny_manifest, tiny_archive, micro_features):
	assert len(tiny_archive) == len(tiny_manifest)
	assert tiny_archive.manifest_indices == tuple(range(len(tiny_manifest)))
	assert tiny_archive.entries == tiny_manifest.entries
	assert tiny_archive.get(0).shape == (micro_features.n_features, micro_features.target_frames)
	assert not np.array_equal(tiny_archive.get(0).values, tiny_archive.get(1).values)


def test_save_and_load_archive(tmp_path, tiny_archive):
	sidecar = save_archive(tmp_path / "features.capf", tiny_archive)
	assert sidecar == tmp_path / "features.capf.csv"
	lines = sidecar.read_text().splitlines()
	assert lines[0] == SIDECAR_HEADER
	assert lines[1] == "0,0,a/neutral/u1_1.wav,a,neutral,u1,1"
	loaded = load_archive(tmp_path / "features.capf")
	assert loaded.manifest_indices == tiny_archive.manifest_indices
	assert loaded.entries == tiny_archive.entries
	for a, b in zip(loaded.matrices, tiny_archive.matrices):
		assert a.n_valid_frames == b.n_valid_frames
		assert np.array_equal(a.values, b.values)


def test_load_archive_checks_sidecar(tmp_path, tiny_archive):
	save_archive(tmp_path / "f.capf", tiny_archive)
	sidecar = tmp_path / "f.capf.csv"
	lines = sidecar.read_text().splitlines()
	sidecar.write_text("\n".join(lines[:-1]) + "\n")
	with pytest.raises(ManifestError, match="rows"):
		load_archive(tmp_path / "f.capf")
	sidecar.write_text("wrong\n")
	with pytest.raises(ManifestError, match="header"):
		load_archive(tmp_path / "f.capf")


def test_select_rekeys_in_given_order(tiny_archive):
	sub = tiny_archive.select([5, 2])
	assert sub.manifest_indices == (0, 1)
	assert sub.entries == (tiny_archive.entries[5], tiny_archive.entries[2])
	assert np.array_equal(sub.get(0).values, tiny_archive.get(5).values)
	assert 2 not in sub


def test_get_missing_item(tiny_archive):
	with pytest.raises(ContractError, match="no features"):
		tiny_archive.select([0]).get(3)


def test_read_recorder_logs_served_items(tiny_archive):
	recorder = ReadRecorder(tiny_archive)
	recorder.get(3)
	batch = recorder.stack([5, 1, 5])
	assert np.array_equal(batch, tiny_archive.stack([5, 1, 5]))
	assert recorder.read == {1, 3, 5}
	with pytest.raises(ContractError):
		ReadRecorder(tiny_archive.select([0])).get(3)


def test_stack_shapes_and_standardisation(tiny_archive):
	raw = tiny_archive.stack([0, 1, 2])
	assert raw.shape == (3, 1, 40, 8)
	stats = standardization_stats([tiny_archive.get(i) for i in range(len(tiny_archive))])
	z = tiny_archive.stack(range(len(tiny_archive)), stats)
	valid = np.concatenate([z[k, 0, :, : tiny_archive.get(k).n_valid_frames] for k in range(len(tiny_archive))], axis=1)
	assert np.allclose(valid.mean(axis=1), 0.0, atol=1e-6)


def test_skip_errors_records_failures(tiny_manifest, tiny_clips, micro_features, make_runner):
	runner = make_runner(fail=(1, 4))
	archive, skipped = extract_archive(tiny_manifest, micro_features, clips=tiny_clips, runner=runner, skip_errors=True)
	assert runner.calls == [len(tiny_manifest)]
	assert [index for index, _ in skipped] == [1, 4]
	assert "scripted failure" in skipped[0][1]
	assert 1 not in archive and 4 not in archive
	assert len(archive) == len(tiny_manifest) - 2


def test_failures_abort_without_skip(tiny_manifest, tiny_clips, micro_features, make_runner):
	with pytest.raises(RuntimeError, match="scripted failure 3"):
		extract_archive(tiny_manifest, micro_features, clips=tiny_clips, runner=make_runner(fail=(3,)))


def test_items_and_source(tiny_manifest, micro_features, make_clip):
	requested = []

	def source(index):
		requested.append(index)
		return make_clip(rate=8000, seconds=0.2, freq=300)

	archive, _ = extract_archive(tiny_manifest, micro_features, items=[7, 3], source=source)
	assert requested == [7, 3]
	assert archive.manifest_indices == (7, 3)
	assert archive.entries == (tiny_manifest[7], tiny_manifest[3])


def test_loader_errors_surface(tiny_manifest, micro_features):
	def loader(path):
		raise ManifestError(f"{path}: gone")

	archive, skipped = extract_archive(tiny_manifest, micro_features, loader=loader, skip_errors=True)
	assert len(archive) == 0
	assert len(skipped) == len(tiny_manifest)
	assert "gone" in skipped[0][1]


def test_clip_count_must_match(tiny_manifest, tiny_clips, micro_features):
	with pytest.raises(ContractError):
		extract_archive(tiny_manifest, micro_features, clips=tiny_clips[:-1])


def test_archive_columns_must_align():
	with pytest.raises(ContractError):
		FeatureArchive((0, 1), (FeatureMatrix(np.zeros((2, 2)), 0),), ())


def test_short_clip_is_skipped(tiny_manifest, tiny_clips, micro_features, make_clip):
	clips = list(tiny_clips)
	clips[0] = make_clip(rate=8000, seconds=0.01)
	archive, skipped = extract_archive(tiny_manifest, micro_features, clips=clips, skip_errors=True)
	assert [i for i, _ in skipped] == [0]
	assert "TooShortError" in skipped[0][1]
	assert len(archive) == len(tiny_manifest) - 1
	assert FeatureConfig().frame_length(8000) == 200
