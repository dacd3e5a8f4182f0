import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contextnet import frontend as fe
from contextnet.errors import UnsupportedFormatError, UnsupportedRateError


def tone(freq, seconds=1.0, amp=1.0, rate=16000):
    t = np.arange(int(seconds * rate)) / rate
    return fe.Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


def test_silence_roundtrip(tmp_path):
    path = tmp_path / "silence.wav"
    fe.write_wav(path, fe.Waveform(np.zeros(16000)))
    w = fe.load_wav(path)
    assert w.sample_rate == 16000
    assert len(w.samples) == 16000 and not w.samples.any()


def test_sine_roundtrip(tmp_path):
    path = tmp_path / "sine.wav"
    fe.write_wav(path, tone(440.0, amp=32767 / 32768))
    peak = np.abs(fe.load_wav(path).samples).max()
    assert 0.999 <= peak <= 1.0


def _riff(fmt_fields, data=b"", with_fmt=True, with_data=True):
    body = b"WAVE"
    if with_fmt:
        fmt = struct.pack("<HHIIHH", *fmt_fields)
        body += b"fmt " + struct.pack("<I", len(fmt)) + fmt
    if with_data:
        body += b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


@pytest.mark.parametrize("fields,needle", [
    ((1, 2, 16000, 64000, 4, 16), "channels"),
    ((3, 1, 16000, 64000, 4, 32), "codec"),
    ((1, 1, 16000, 16000, 1, 8), "bits_per_sample"),
])
def test_unsupported_formats_name_the_field(tmp_path, fields, needle):
    path = tmp_path / "bad.wav"
    path.write_bytes(_riff(fields, b"\0\0\0\0"))
    with pytest.raises(UnsupportedFormatError, match=needle):
        fe.load_wav(path)


def test_missing_chunks(tmp_path):
    path = tmp_path / "nofmt.wav"
    path.write_bytes(_riff((1, 1, 16000, 32000, 2, 16), with_fmt=False))
    with pytest.raises(UnsupportedFormatError, match="fmt"):
        fe.load_wav(path)
    path.write_bytes(_riff((1, 1, 16000, 32000, 2, 16), with_data=False))
    with pytest.raises(UnsupportedFormatError, match="data"):
        fe.load_wav(path)
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(UnsupportedFormatError, match="RIFF"):
        fe.load_wav(path)


def test_frame_count_one_second():
    feats = fe.log_mel_filterbank(fe.Waveform(np.zeros(16000)))
    assert feats.frames.shape == ((16000 - 400) // 160 + 1, 80) == (98, 80)


def test_zero_audio_hits_floor():
    feats = fe.log_mel_filterbank(fe.Waveform(np.zeros(16000)))
    np.testing.assert_array_equal(feats.frames, np.full((98, 80), math.log(1e-10)))
    assert feats.frames[0, 0] == pytest.approx(-23.02585, abs=1e-5)


def test_short_audio_gives_no_frames():
    assert fe.log_mel_filterbank(fe.Waveform(np.zeros(399))).frames.shape == (0, 80)


def test_wrong_rate():
    with pytest.raises(UnsupportedRateError):
        fe.log_mel_filterbank(fe.Waveform(np.zeros(8000), 8000))


@pytest.mark.parametrize("freq", [440.0, 1000.0, 2500.0, 5000.0])
def test_tone_peaks_at_nearest_mel_bin(freq):
    feats = fe.log_mel_filterbank(tone(freq, amp=0.5)).frames
    centers = fe.mel_center_frequencies()
    expected = int(np.argmin(np.abs(centers - freq)))
    assert np.all(np.argmax(feats, axis=1) == expected)


def test_filterbank_geometry():
    bank = fe.mel_filterbank()
    assert bank.shape == (257, 80)
    assert np.all(bank.max(axis=0) > 0)
    freqs = np.arange(257) * 16000 / 512
    assert not bank[freqs < 125.0].any() and not bank[freqs > 7600.0].any()


def test_deterministic():
    w = tone(700.0, amp=0.3)
    a = fe.log_mel_filterbank(w).frames
    b = fe.log_mel_filterbank(fe.Waveform(w.samples.copy())).frames
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(400, 40000))
def test_doubling_length(n):
    # with x = (n - 400) / 160: T(2n) - 2T(n) = floor(2x + 2.5) - 2 floor(x) - 1, which lies in {1, 2, 3}
    x = (n - 400) / 160
    assert fe.num_frames(2 * n) - 2 * fe.num_frames(n) == math.floor(2 * x + 2.5) - 2 * math.floor(x) - 1
    assert fe.num_frames(2 * n) - 2 * fe.num_frames(n) in {1, 2, 3}


def test_energy_scaling(rng):
    w = fe.Waveform(rng.uniform(-0.3, 0.3, 16000))
    c = 2.5
    a = fe.log_mel_filterbank(w).frames
    b = fe.log_mel_filterbank(fe.Waveform(w.samples * c)).frames
    live = a > math.log(1e-10)
    np.testing.assert_allclose((b - a)[live], 2 * math.log(c), atol=1e-6)


def test_feature_file_roundtrip(tmp_path):
    feats = fe.log_mel_filterbank(tone(900.0, amp=0.2))
    path = tmp_path / "x.fb"
    fe.write_features(path, feats)
    raw = path.read_bytes()
    assert raw[:4] == b"CNFB" and struct.unpack("<II", raw[4:12]) == (98, 80)
    np.testing.assert_array_equal(fe.read_features(path).frames, feats.frames.astype(np.float32))


def test_feature_file_rejects_garbage(tmp_path):
    path = tmp_path / "x.fb"
    path.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(UnsupportedFormatError):
        fe.read_features(path)
