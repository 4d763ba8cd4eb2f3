import struct

import numpy as np
import pytest

from capsid.core.errors import UnsupportedFormatError, WavParseError
from capsid.corpus.types import AudioClip
from capsid.corpus.wav import decode_wav_bytes, encode_wav_bytes, load_wav, write_wav


def test_decode_pcm16_scales_to_unit_range(wav_bytes):
	clip = decode_wav_bytes(wav_bytes([0.0, 0.5, -0.5, -1.0], rate=8000))
	assert clip.sample_rate_hz == 8000
	assert np.allclose(clip.samples, [0.0, 0.5, -0.5, -1.0])


def test_decode_float32(wav_bytes):
	clip = decode_wav_bytes(wav_bytes([0.25, -0.125], float32=True))
	assert clip.samples.tolist() == [0.25, -0.125]


def test_decode_stereo_averages_channels(wav_bytes):
	clip = decode_wav_bytes(wav_bytes([0.5, 0.0, 0.25, 0.25], channels=2, float32=True))
	assert clip.samples.tolist() == [0.25, 0.25]


def test_decode_extensible_reads_sub_format(wav_bytes):
	clip = decode_wav_bytes(wav_bytes([0.5, -0.5], float32=True, extensible=True))
	assert clip.samples.tolist() == [0.5, -0.5]


def test_decode_skips_unknown_and_odd_sized_chunks(wav_bytes):
	payload = wav_bytes([0.5, 0.25], float32=True, extra_chunks=((b"LIST", b"abc"), (b"junk", b"")))
	assert decode_wav_bytes(payload).samples.tolist() == [0.5, 0.25]


def test_bad_magic_names_riff_chunk(wav_bytes):
	payload = b"RIFX" + wav_bytes([0.0])[4:]
	with pytest.raises(WavParseError) as info:
		decode_wav_bytes(payload)
	assert info.value.chunk == "RIFF"


def test_bad_form_type(wav_bytes):
	payload = bytearray(wav_bytes([0.0]))
	payload[8:12] = b"AVI "
	with pytest.raises(WavParseError) as info:
		decode_wav_bytes(bytes(payload))
	assert info.value.chunk == "WAVE"


def test_missing_data_chunk(wav_bytes):
	fmt = wav_bytes.chunk(b"fmt ", wav_bytes.fmt_body(1, 1, 16000, 16))
	body = b"WAVE" + fmt
	with pytest.raises(WavParseError) as info:
		decode_wav_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
	assert info.value.chunk == "data"


def test_missing_fmt_chunk(wav_bytes):
	body = b"WAVE" + wav_bytes.chunk(b"data", b"\x00\x00")
	with pytest.raises(WavParseError) as info:
		decode_wav_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
	assert info.value.chunk == "fmt "


def test_truncated_chunk_is_reported(wav_bytes):
	payload = wav_bytes([0.1] * 10)
	with pytest.raises(WavParseError) as info:
		decode_wav_bytes(payload[:-6])
	assert info.value.chunk == "data"


def test_unsupported_bit_depth(wav_bytes):
	fmt = wav_bytes.chunk(b"fmt ", wav_bytes.fmt_body(1, 1, 16000, 24))
	body = b"WAVE" + fmt + wav_bytes.chunk(b"data", b"\x00" * 6)
	with pytest.raises(UnsupportedFormatError):
		decode_wav_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_short_file():
	with pytest.raises(WavParseError):
		decode_wav_bytes(b"RIFF")


def test_load_missing_file(tmp_path):
	with pytest.raises(WavParseError):
		load_wav(tmp_path / "absent.wav")


def test_write_then_load_within_pcm_quantisation(tmp_path):
	samples = 0.4 * np.sin(np.linspace(0, 20, 800))
	write_wav(tmp_path / "a" / "x.wav", AudioClip(samples, 12000))
	clip = load_wav(tmp_path / "a" / "x.wav")
	assert clip.sample_rate_hz == 12000
	assert np.max(np.abs(clip.samples - samples)) <= 0.5 / 32768 + 1e-12


def test_encode_clips_full_scale():
	payload = encode_wav_bytes(np.array([1.0, -1.0]), 8000)
	assert np.frombuffer(payload[-4:], dtype="<i2").tolist() == [32767, -32768]
