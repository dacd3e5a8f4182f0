"""WAV ingestion and 80-channel log-mel filterbank features."""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import UnsupportedFormatError, UnsupportedRateError

SAMPLE_RATE = 16000
NUM_MELS = 80
FRAME_LENGTH = 0.025
FRAME_SHIFT = 0.010
WINDOW_SAMPLES = 400
HOP_SAMPLES = 160
FFT_SIZE = 512
MEL_LOW_HZ = 125.0
MEL_HIGH_HZ = 7600.0
LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"CNFB"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise UnsupportedRateError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class AcousticFeatures:
    frames: np.ndarray  # [T, 80]
    frame_shift: float = FRAME_SHIFT
    frame_length: float = FRAME_LENGTH

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def num_frames(num_samples: int) -> int:
    if num_samples < WINDOW_SAMPLES:
        return 0
    return (num_samples - WINDOW_SAMPLES) // HOP_SAMPLES + 1


# -- WAV ------------------------------------------------------------------

def load_wav(path) -> Waveform:
    """Read a mono 16-bit PCM RIFF/WAVE file, scaling samples by 1/32768."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF":
        raise UnsupportedFormatError(f"{path}: missing RIFF header")
    if raw[8:12] != b"WAVE":
        raise UnsupportedFormatError(f"{path}: RIFF form type is not WAVE")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise UnsupportedFormatError(f"{path}: missing 'fmt ' chunk")
    if data is None:
        raise UnsupportedFormatError(f"{path}: missing 'data' chunk")
    if len(fmt) < 16:
        raise UnsupportedFormatError(f"{path}: truncated 'fmt ' chunk")
    codec, channels, rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if codec != 1:
        raise UnsupportedFormatError(f"{path}: codec {codec} is not PCM (1)")
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: channels={channels}, only mono is supported")
    if bits != 16:
        raise UnsupportedFormatError(f"{path}: bits_per_sample={bits}, only 16 is supported")
    pcm = np.frombuffer(data[:len(data) - len(data) % 2], dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, waveform: Waveform) -> None:
    pcm = np.clip(np.round(waveform.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(waveform.sample_rate))
        fh.writeframes(pcm.tobytes())


# -- log-mel --------------------------------------------------------------------

def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies() -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ), NUM_MELS + 2))
    return edges[1:-1]


@lru_cache(maxsize=1)
def mel_filterbank() -> np.ndarray:
    """Triangular filters, shape ``[FFT_SIZE // 2 + 1, NUM_MELS]``, peak 1."""
    edges = mel_to_hz(np.linspace(hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ), NUM_MELS + 2))
    freqs = np.arange(FFT_SIZE // 2 + 1) * SAMPLE_RATE / FFT_SIZE
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.flags.writeable = False
    return bank.T


@lru_cache(maxsize=1)
def _hann() -> np.ndarray:
    n = np.arange(WINDOW_SAMPLES)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WINDOW_SAMPLES)


def log_mel_filterbank(w: Waveform) -> AcousticFeatures:
    if w.sample_rate != SAMPLE_RATE:
        raise UnsupportedRateError(f"sample rate {w.sample_rate} Hz, expected {SAMPLE_RATE} Hz")
    T = num_frames(len(w.samples))
    if T == 0:
        return AcousticFeatures(np.zeros((0, NUM_MELS)))
    frames = sliding_window_view(w.samples, WINDOW_SAMPLES)[::HOP_SAMPLES][:T]
    spectrum = np.fft.rfft(frames * _hann(), n=FFT_SIZE, axis=-1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    energy = power @ mel_filterbank()
    return AcousticFeatures(np.log(np.maximum(energy, LOG_FLOOR)))


# -- feature files ------------------------------------------------------------------

def write_features(path, features: AcousticFeatures) -> None:
    frames = np.asarray(features.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", frames.shape[0], NUM_MELS))
        fh.write(frames.tobytes(order="C"))


def read_features(path) -> AcousticFeatures:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise UnsupportedFormatError(f"{path}: not a CNFB feature file")
    T, dim = struct.unpack("<II", raw[4:12])
    if dim != NUM_MELS:
        raise UnsupportedFormatError(f"{path}: feature dim {dim}, expected {NUM_MELS}")
    expected = 12 + 4 * T * dim
    if len(raw) != expected:
        raise UnsupportedFormatError(f"{path}: size {len(raw)} bytes, expected {expected}")
    frames = np.frombuffer(raw[12:], dtype="<f4").reshape(T, dim).astype(np.float32)
    return AcousticFeatures(frames)
