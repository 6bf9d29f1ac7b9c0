"""Synthetic 2-second harmonic-plus-noise clip with a known F0 track.

Voiced frames carry a sum of harmonics (phase-accumulated from the F0
contour) plus faint noise; unvoiced frames carry high-passed noise. The
77-dim feature matrix is derived from the known components: real cepstrum
of each frame, per-band noise ratio in dB, continuous log-F0 and V/UV.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import excitation as ex
from .features import N_BAP, N_MCEP, FeatureTrack

SAMPLE_RATE = 48000
N_FRAMES = 400
HARMONIC_CEILING = 6000.0
VOICED_NOISE = 0.005
UNVOICED_NOISE = 0.06
ANALYSIS_FFT = 2048
BAND_FLOOR_DB = -60.0


@dataclass
class Fixture:
    wave: np.ndarray
    track: FeatureTrack
    f0: np.ndarray       # per frame, 0 where unvoiced
    periodic: np.ndarray
    aperiodic: np.ndarray
    sample_rate: int = SAMPLE_RATE


def f0_track(n_frames: int = N_FRAMES) -> np.ndarray:
    f0 = np.zeros(n_frames)
    a, b = int(0.15 * n_frames), int(0.5 * n_frames)
    f0[a:b] = np.geomspace(140.0, 220.0, b - a)   # glide
    c, d = int(0.65 * n_frames), int(0.95 * n_frames)
    t = np.arange(d - c) * ex.FRAME_SHIFT
    f0[c:d] = 200.0 * (1.0 + 0.03 * np.sin(2 * np.pi * 5.5 * t))   # vibrato
    return f0


def _highpass_noise(rng, n: int) -> np.ndarray:
    # first difference tilts white noise towards high frequencies
    w = rng.standard_normal(n + 1)
    return (w[1:] - w[:-1]) / np.sqrt(2.0)


def _frames(x: np.ndarray, hop: int, size: int) -> np.ndarray:
    pad = np.pad(x, (size // 2, size // 2))
    n = len(x) // hop
    idx = np.arange(n)[:, None] * hop + hop // 2 + np.arange(size)[None, :]
    return pad[idx] * np.hanning(size)[None, :]


def analyze(periodic: np.ndarray, aperiodic: np.ndarray, f0: np.ndarray, sr: int = SAMPLE_RATE) -> np.ndarray:
    hop = ex.hop_size(sr)
    fp = np.abs(np.fft.rfft(_frames(periodic, hop, ANALYSIS_FFT), axis=1)) ** 2
    fa = np.abs(np.fft.rfft(_frames(aperiodic, hop, ANALYSIS_FFT), axis=1)) ** 2
    power = fp + fa + 1e-12
    ceps = np.fft.irfft(0.5 * np.log(power), axis=1)[:, :N_MCEP]
    edges = np.linspace(0, power.shape[1], N_BAP + 1).astype(int)
    bap = np.empty((len(power), N_BAP))
    for i in range(N_BAP):
        band = slice(edges[i], edges[i + 1])
        ratio = fa[:, band].sum(1) / power[:, band].sum(1)
        bap[:, i] = np.maximum(10.0 * np.log10(ratio + 1e-12), BAND_FLOOR_DB)
    contour = ex.F0Contour.from_frames(f0)
    vuv = (f0 > 0).astype(np.float64)
    return np.column_stack([ceps, bap, contour.continuous_log_f0, vuv]).astype(np.float32)


def make_fixture(seed: int = 0, n_frames: int = N_FRAMES, sr: int = SAMPLE_RATE) -> Fixture:
    rng = np.random.default_rng(seed)
    hop = ex.hop_size(sr)
    f0 = f0_track(n_frames)
    contour = ex.F0Contour.from_frames(f0)
    f0_s = ex.upsample_f0(contour, sr)
    gate = ex.smooth_vuv(ex.upsample_vuv(contour, sr), ex.VUV_WINDOW_MS, sr)
    cycles = np.cumsum(f0_s / sr)
    periodic = np.zeros(n_frames * hop)
    for k in range(1, int(HARMONIC_CEILING // f0[f0 > 0].min()) + 1):
        amp = np.where(k * f0_s < HARMONIC_CEILING, 0.25 / k, 0.0)
        periodic += amp * np.sin(2 * np.pi * k * cycles + rng.uniform(0, 2 * np.pi))
    periodic *= gate
    aperiodic = VOICED_NOISE * rng.standard_normal(len(periodic)) * gate
    aperiodic += UNVOICED_NOISE * _highpass_noise(rng, len(periodic)) * (1.0 - gate)
    wave = periodic + aperiodic
    return Fixture(wave, FeatureTrack(analyze(periodic, aperiodic, f0, sr)), f0, periodic, aperiodic, sr)
