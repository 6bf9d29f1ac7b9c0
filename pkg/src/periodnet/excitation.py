"""Explicit generator inputs: sine, Gaussian noise and a smoothed V/UV gate."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

FRAME_SHIFT = 0.005
SAMPLE_RATE = 48000
SINE_AMPLITUDE = 0.1
VUV_WINDOW_MS = 10.0


def hop_size(sample_rate: float, frame_shift: float = FRAME_SHIFT) -> int:
    hop = sample_rate * frame_shift
    if abs(hop - round(hop)) > 1e-9 or round(hop) < 1:
        raise ValueError(f"sample_rate * frame_shift = {hop} is not a positive integer hop")
    return int(round(hop))


def interpolate_f0(frame_values) -> np.ndarray:
    """Continuous log-F0: log of voiced frames, linear in log across unvoiced gaps.

    Leading and trailing gaps hold the nearest voiced value.
    """
    f0 = np.asarray(frame_values, dtype=np.float64)
    voiced = np.flatnonzero(f0 > 0)
    if voiced.size == 0:
        raise ValueError("cannot interpolate F0: no voiced frame")
    return np.interp(np.arange(f0.size), voiced, np.log(f0[voiced]))


@dataclass(frozen=True)
class F0Contour:
    """Frame-level F0 with its continuous log version and V/UV flags.

    ``scale`` accumulates F0 scaling multiplicatively, so chained scalings
    and a single scaling by the product agree exactly.
    """

    base_frame_values: np.ndarray
    base_log_f0: np.ndarray
    vuv: np.ndarray
    frame_shift: float = FRAME_SHIFT
    scale: float = 1.0

    def __post_init__(self):
        n = len(self.base_frame_values)
        if len(self.vuv) != n or len(self.base_log_f0) != n:
            raise ValueError("F0 contour fields differ in length")
        if np.any(self.base_frame_values[self.vuv > 0] <= 0):
            raise ValueError("voiced frame with non-positive F0")
        if not np.all(np.isfinite(self.base_log_f0)):
            raise ValueError("continuous log-F0 must be finite")

    @classmethod
    def from_frames(cls, frame_values, frame_shift: float = FRAME_SHIFT) -> F0Contour:
        f0 = np.asarray(frame_values, dtype=np.float64)
        return cls(f0, interpolate_f0(f0), (f0 > 0).astype(np.float64), frame_shift)

    @classmethod
    def from_log_f0(cls, continuous_log_f0, vuv, frame_shift: float = FRAME_SHIFT) -> F0Contour:
        """Rebuild from the feature-file columns (continuous log-F0 and binary V/UV)."""
        lf0 = np.asarray(continuous_log_f0, dtype=np.float64)
        vuv = (np.asarray(vuv) > 0.5).astype(np.float64)
        return cls(np.exp(lf0) * vuv, lf0, vuv, frame_shift)

    @property
    def frame_values(self) -> np.ndarray:
        return self.base_frame_values * self.scale

    @property
    def continuous_log_f0(self) -> np.ndarray:
        if self.scale == 1.0:
            return self.base_log_f0
        return self.base_log_f0 + np.log(self.scale)

    def __len__(self) -> int:
        return len(self.base_frame_values)


def _frame_interp(values: np.ndarray, hop: int, start: int = 0, length: int | None = None) -> np.ndarray:
    # frame n sits at sample n*hop + hop//2; edges hold
    n = len(values)
    if length is None:
        length = n * hop - start
    pos = (np.arange(start, start + length) - hop // 2) / hop
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w = np.clip(pos - i0, 0.0, 1.0)
    if values.ndim == 2:
        return values[i0] + w[:, None] * (values[i1] - values[i0])
    return values[i0] + w * (values[i1] - values[i0])


def upsample_f0(contour: F0Contour, sample_rate: float = SAMPLE_RATE, continuous: bool = True) -> np.ndarray:
    """Per-sample F0 in Hz, linearly interpolated between frame centers.

    With ``continuous`` the interpolated contour runs through unvoiced gaps
    (voicing is applied separately through the V/UV gate); otherwise the raw
    frame values, zeros included, are interpolated.
    """
    hop = hop_size(sample_rate, contour.frame_shift)
    src = np.exp(contour.continuous_log_f0) if continuous else contour.frame_values
    return _frame_interp(np.asarray(src, dtype=np.float64), hop)


def upsample_vuv(contour: F0Contour, sample_rate: float = SAMPLE_RATE) -> np.ndarray:
    hop = hop_size(sample_rate, contour.frame_shift)
    return np.repeat(contour.vuv, hop)


def gen_sine(f0, vuv_smooth, sample_rate: float = SAMPLE_RATE, amplitude: float = SINE_AMPLITUDE,
             initial_phase: float = 0.0) -> np.ndarray:
    """Phase-accumulated sinusoid, zero wherever the smoothed V/UV gate is zero.

    phase[t] = initial_phase + 2*pi * sum_{u<=t} f0[u] / sample_rate
    """
    f0 = np.asarray(f0, dtype=np.float64)
    gate = np.asarray(vuv_smooth, dtype=np.float64)
    if f0.shape != gate.shape:
        raise ValueError("f0 and vuv sequences differ in length")
    if np.any(f0 < 0):
        raise ValueError("negative F0")
    if np.any(f0 >= sample_rate / 2):
        raise ValueError(f"F0 reaches Nyquist ({sample_rate / 2} Hz)")
    cycles = np.mod(np.cumsum(f0 / sample_rate), 1.0)
    return amplitude * np.sin(2.0 * np.pi * cycles + initial_phase) * (gate > 0)


def gen_noise(length: int, seed) -> np.ndarray:
    if length < 0:
        raise ValueError("negative length")
    return np.random.default_rng(seed).standard_normal(length)


def smooth_vuv(vuv, window_ms: float = VUV_WINDOW_MS, sample_rate: float = SAMPLE_RATE) -> np.ndarray:
    """Zero-phase Hann moving average of a binary V/UV sequence, clamped to [0, 1]."""
    if window_ms < 0:
        raise ValueError("window must be non-negative")
    x = np.asarray(vuv, dtype=np.float64)
    half = int(round(window_ms * 1e-3 * sample_rate / 2))
    if half == 0 or x.size == 0:
        return np.clip(x, 0.0, 1.0)
    kernel = np.hanning(2 * half + 3)[1:-1]
    kernel /= kernel.sum()
    padded = np.pad(x, half, mode="edge")
    # direct convolution keeps exact zeros where the whole window is unvoiced
    return np.clip(np.convolve(padded, kernel, mode="valid"), 0.0, 1.0)


def scale_f0(contour: F0Contour, factor: float, sample_rate: float = SAMPLE_RATE) -> F0Contour:
    if factor <= 0:
        raise ValueError("F0 scale factor must be positive")
    peak = float(np.exp(contour.continuous_log_f0.max())) * factor
    if peak >= sample_rate / 2:
        raise ValueError(f"scaled F0 peak {peak:.1f} Hz reaches Nyquist")
    return replace(contour, scale=contour.scale * factor)


@dataclass
class ExcitationSet:
    sine: np.ndarray
    noise: np.ndarray
    vuv_smooth: np.ndarray
    sample_rate: float = SAMPLE_RATE

    def __post_init__(self):
        if not (len(self.sine) == len(self.noise) == len(self.vuv_smooth)):
            raise ValueError("excitation sequences differ in length")

    def __len__(self) -> int:
        return len(self.sine)

    def astype(self, dtype) -> ExcitationSet:
        return ExcitationSet(self.sine.astype(dtype), self.noise.astype(dtype),
                             self.vuv_smooth.astype(dtype), self.sample_rate)


def build_excitation(contour: F0Contour, sample_rate: float = SAMPLE_RATE, seed=0,
                     amplitude: float = SINE_AMPLITUDE, initial_phase: float = 0.0,
                     window_ms: float = VUV_WINDOW_MS) -> ExcitationSet:
    vuv = smooth_vuv(upsample_vuv(contour, sample_rate), window_ms, sample_rate)
    f0 = upsample_f0(contour, sample_rate)
    sine = gen_sine(f0, vuv, sample_rate, amplitude, initial_phase)
    return ExcitationSet(sine, gen_noise(len(sine), seed), vuv, sample_rate)
