"""Frame-rate acoustic features: file I/O, normalization and sample-rate upsampling.

Column layout of a 77-dim track::

    0..49   mel-cepstrum
    50..74  band aperiodicity
    75      continuous log-F0 (natural log of Hz)
    76      V/UV flag (0/1 before normalization)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DataError, FormatError
from .excitation import FRAME_SHIFT, F0Contour, _frame_interp, hop_size

N_MCEP = 50
N_BAP = 25
FEATURE_DIM = N_MCEP + N_BAP + 2
LF0_COL = 75
VUV_COL = 76
STD_FLOOR = 1e-8

_FEAT_MAGIC = b"PNFT"
_FEAT_HEADER = struct.Struct("<4sIIId")
_STATS_MAGIC = b"PNST"


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class FeatureTrack:
    frames: np.ndarray
    frame_shift: float = FRAME_SHIFT
    normalized: bool = False

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] not in (FEATURE_DIM, FEATURE_DIM - 1):
            raise DataError(f"feature matrix must be [N x 77] (or 76 without F0), got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def has_f0(self) -> bool:
        return self.dim == FEATURE_DIM

    @property
    def vuv(self) -> np.ndarray:
        return self.frames[:, -1]

    def contour(self) -> F0Contour:
        if not self.has_f0 or self.normalized:
            raise DataError("F0 contour needs an un-normalized 77-dim track")
        return F0Contour.from_log_f0(self.frames[:, LF0_COL], self.frames[:, VUV_COL], self.frame_shift)

    def with_log_f0_shift(self, delta: float) -> FeatureTrack:
        """Add ``delta`` to the log-F0 column (F0 scaling by exp(delta))."""
        if not self.has_f0 or self.normalized:
            raise DataError("F0 shift needs an un-normalized 77-dim track")
        frames = self.frames.copy()
        frames[:, LF0_COL] = (frames[:, LF0_COL].astype(np.float64) + delta).astype(frames.dtype)
        return replace(self, frames=frames)


@dataclass(frozen=True)
class ConditioningTrack:
    samples: np.ndarray  # [C x T]
    includes_f0: bool


def save_features(path, track: FeatureTrack) -> None:
    frames = np.ascontiguousarray(track.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(_FEAT_MAGIC, 1, frames.shape[0], frames.shape[1], track.frame_shift))
        fh.write(frames.tobytes())


def load_features(path) -> FeatureTrack:
    raw = Path(path).read_bytes()
    if len(raw) < _FEAT_HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    magic, version, n, dim, shift = _FEAT_HEADER.unpack_from(raw)
    if magic != _FEAT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim != FEATURE_DIM:
        raise DataError(f"{path}: feature dimension {dim}, expected {FEATURE_DIM}")
    need = _FEAT_HEADER.size + 4 * n * dim
    if len(raw) != need:
        raise CorruptionError(f"{path}: payload is {len(raw)} bytes, expected {need}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_FEAT_HEADER.size).reshape(n, dim).astype(np.float32)
    vuv = frames[:, VUV_COL]
    if not np.all((vuv == 0) | (vuv == 1)):
        raise DataError(f"{path}: V/UV column must be 0/1")
    if not np.all(np.isfinite(frames)):
        raise DataError(f"{path}: non-finite feature values")
    return FeatureTrack(frames, shift)


def save_stats(path, stats: NormStats) -> None:
    with open(path, "wb") as fh:
        fh.write(_STATS_MAGIC + struct.pack("<I", stats.dim))
        fh.write(np.asarray(stats.mean, dtype="<f4").tobytes())
        fh.write(np.asarray(stats.std, dtype="<f4").tobytes())


def load_stats(path) -> NormStats:
    raw = Path(path).read_bytes()
    if raw[:4] != _STATS_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise CorruptionError(f"{path}: truncated header")
    (dim,) = struct.unpack_from("<I", raw, 4)
    if len(raw) != 8 + 8 * dim:
        raise CorruptionError(f"{path}: expected {8 + 8 * dim} bytes, got {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f4", offset=8).astype(np.float32)
    return NormStats(vals[:dim].copy(), vals[dim:].copy())


def fit_normalizer(tracks) -> NormStats:
    """Global per-dimension mean/std (population) over every frame of every track."""
    tracks = list(tracks)
    total = sum(t.n_frames for t in tracks)
    if total == 0:
        raise DataError("cannot fit a normalizer on an empty corpus")
    dims = {t.dim for t in tracks}
    if len(dims) != 1:
        raise DataError(f"tracks disagree on dimension: {sorted(dims)}")
    acc = np.zeros(dims.pop())
    for t in tracks:
        acc += t.frames.astype(np.float64).sum(axis=0)
    mean = acc / total
    sq = np.zeros_like(mean)
    for t in tracks:
        sq += ((t.frames.astype(np.float64) - mean) ** 2).sum(axis=0)
    std = np.maximum(np.sqrt(sq / total), STD_FLOOR)
    return NormStats(mean, std)


def apply_normalizer(track: FeatureTrack, stats: NormStats | None, direction: str = "forward") -> FeatureTrack:
    if stats is None:
        raise DataError("normalizer statistics have not been fitted")
    if stats.dim != track.dim:
        raise DataError(f"stats are {stats.dim}-dim, track is {track.dim}-dim")
    x = track.frames.astype(np.float64)
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    if direction == "forward":
        out, normalized = (x - mean) / std, True
    elif direction == "inverse":
        out, normalized = x * std + mean, False
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return replace(track, frames=out.astype(track.frames.dtype), normalized=normalized)


def drop_f0(track: FeatureTrack) -> FeatureTrack:
    if track.dim != FEATURE_DIM:
        raise DataError(f"drop_f0 expects a {FEATURE_DIM}-dim track, got {track.dim}")
    return replace(track, frames=np.delete(track.frames, LF0_COL, axis=1))


def upsample_frames(track: FeatureTrack, sample_rate: float = 48000, mode: str = "linear",
                    start: int = 0, length: int | None = None) -> ConditioningTrack:
    """Sample-rate conditioning ``[C x T]`` with ``T = n_frames * hop``.

    ``start``/``length`` select a window of that output without computing
    the rest (values are identical to slicing the full result).
    """
    hop = hop_size(sample_rate, track.frame_shift)
    total = track.n_frames * hop
    if length is None:
        length = total - start
    if start < 0 or start + length > total:
        raise ValueError(f"window [{start}, {start + length}) outside [0, {total})")
    if mode == "nearest":
        idx = np.arange(start, start + length) // hop
        out = track.frames[idx]
    elif mode == "linear":
        out = _frame_interp(track.frames, hop, start, length)
    else:
        raise ValueError(f"unknown upsampling mode {mode!r}")
    return ConditioningTrack(np.ascontiguousarray(out.T, dtype=track.frames.dtype), track.has_f0)
