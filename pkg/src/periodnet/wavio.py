"""Mono 16-bit PCM WAV reading and writing."""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError

FULL_SCALE = 32768.0


@dataclass
class WavClip:
    samples: np.ndarray
    sample_rate: int

    def __len__(self) -> int:
        return len(self.samples)


def quantize(x) -> np.ndarray:
    q = np.round(np.asarray(x, dtype=np.float64) * FULL_SCALE)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(path, clip: WavClip) -> None:
    data = np.asarray(clip.samples)
    if data.ndim != 1:
        raise DataError("only mono clips can be written")
    if not np.all(np.isfinite(data)):
        raise DataError("refusing to write non-finite samples")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(clip.sample_rate))
        w.writeframes(quantize(data).tobytes())


def read_wav(path) -> WavClip:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise FormatError(f"{path}: {w.getnchannels()} channels, expected mono")
            if w.getsampwidth() != 2:
                raise FormatError(f"{path}: {8 * w.getsampwidth()}-bit samples, expected 16-bit PCM")
            sr = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as e:
        raise FormatError(f"{path}: not a readable PCM WAV file ({e})") from e
    if len(raw) != 2 * n:
        raise FormatError(f"{path}: header promises {n} samples, found {len(raw) // 2}")
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / FULL_SCALE
    return WavClip(x, sr)
