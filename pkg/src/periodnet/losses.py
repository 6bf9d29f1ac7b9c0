"""Multi-resolution STFT loss and least-squares adversarial objectives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ShapeError
from .nets import DiscriminatorBank, PeriodNetOutput, discriminate
from .tensorcore import MAG_EPS, Tensor

# (fft_size, hop, win_length) at 48 kHz
DEFAULT_RESOLUTIONS = ((2048, 240, 1200), (4096, 480, 2400), (1024, 100, 480))
LAMBDA_ADV = 4.0


@dataclass(frozen=True)
class STFTLossConfig:
    resolutions: tuple = DEFAULT_RESOLUTIONS
    eps: float = MAG_EPS

    def __post_init__(self):
        res = tuple(tuple(int(v) for v in r) for r in self.resolutions)
        if not res:
            raise ValueError("at least one STFT resolution is required")
        for fft, hop, win in res:
            if win > fft or hop < 1:
                raise ValueError(f"invalid resolution {(fft, hop, win)}")
        object.__setattr__(self, "resolutions", res)

    @property
    def max_fft(self) -> int:
        return max(r[0] for r in self.resolutions)


@dataclass(frozen=True)
class ObjectiveWeights:
    lambda_adv: float = LAMBDA_ADV

    def __post_init__(self):
        if not np.isfinite(self.lambda_adv) or self.lambda_adv < 0:
            raise ValueError("lambda_adv must be finite and non-negative")


def _flat_wave(x) -> Tensor:
    x = tc.as_tensor(x)
    if x.ndim == 3:
        return tc.reshape(x, (x.shape[0], x.shape[2]))
    return x


def _magnitudes(x_hat, x, res, eps):
    x_hat, x = _flat_wave(x_hat), _flat_wave(x)
    # a single (1, T) channel output against a (T,) reference
    if x_hat.ndim == 2 and x.ndim == 1 and x_hat.shape[0] == 1:
        x = tc.reshape(x, (1, x.shape[0]))
    elif x.ndim == 2 and x_hat.ndim == 1 and x.shape[0] == 1:
        x_hat = tc.reshape(x_hat, (1, x_hat.shape[0]))
    if x_hat.shape != x.shape:
        raise ShapeError(f"estimate {x_hat.shape} and reference {x.shape} differ")
    fft, hop, win = res
    return tc.stft_magnitude(x_hat, fft, hop, win, eps), tc.stft_magnitude(x, fft, hop, win, eps)


def _sc(mag_hat: Tensor, mag: Tensor) -> Tensor:
    return tc.norm(mag - mag_hat) / tc.norm(mag)


def _log_mag(mag_hat: Tensor, mag: Tensor) -> Tensor:
    return tc.mean(tc.abs(tc.log(mag) - tc.log(mag_hat)))


def spectral_convergence(x_hat, x, res, eps: float = MAG_EPS) -> Tensor:
    """||X| - |X_hat||_F / ||X||_F."""
    if not np.any(tc.as_tensor(x).data):
        raise ValueError("spectral convergence is undefined for an all-zero reference")
    return _sc(*_magnitudes(x_hat, x, res, eps))


def log_stft_magnitude_loss(x_hat, x, res, eps: float = MAG_EPS) -> Tensor:
    return _log_mag(*_magnitudes(x_hat, x, res, eps))


def mr_stft_terms(x_hat, x, cfg: STFTLossConfig) -> list[tuple[Tensor, Tensor]]:
    """(spectral convergence, log magnitude) per resolution, in config order."""
    n = tc.as_tensor(x).shape[-1]
    if n < cfg.max_fft:
        raise ShapeError(f"signal of {n} samples shorter than the largest FFT ({cfg.max_fft})")
    if not np.any(tc.as_tensor(x).data):
        raise ValueError("MR-STFT loss is undefined for an all-zero reference")
    terms = []
    for res in cfg.resolutions:
        mag_hat, mag = _magnitudes(x_hat, x, res, cfg.eps)
        terms.append((_sc(mag_hat, mag), _log_mag(mag_hat, mag)))
    return terms


def mr_stft_loss(x_hat, x, cfg: STFTLossConfig = STFTLossConfig()) -> Tensor:
    terms = mr_stft_terms(x_hat, x, cfg)
    total = None
    for sc, mag in terms:
        total = sc + mag if total is None else total + sc + mag
    return total * (1.0 / len(terms))


def adversarial_g_loss(scores) -> Tensor:
    """Mean over scales of mean((1 - D(x_hat))^2)."""
    if not scores:
        raise ValueError("need at least one score map")
    per = [tc.mean(tc.square(1.0 - s)) for s in scores]
    total = per[0]
    for p in per[1:]:
        total = total + p
    return total * (1.0 / len(per))


def adversarial_d_loss(scores_real, scores_fake) -> Tensor:
    """Mean over scales of mean((1 - D(x))^2) + mean(D(x_hat)^2)."""
    if len(scores_real) != len(scores_fake) or not scores_real:
        raise ValueError("real and fake score lists must be non-empty and the same length")
    total = None
    for r, f in zip(scores_real, scores_fake):
        term = tc.mean(tc.square(1.0 - r)) + tc.mean(tc.square(f))
        total = term if total is None else total + term
    return total * (1.0 / len(scores_real))


@dataclass
class GeneratorLoss:
    total: Tensor
    stft: Tensor
    adv: Tensor | None = None
    details: dict = field(default_factory=dict)


def generator_objective(output, x_ref, bank: DiscriminatorBank | None, weights: ObjectiveWeights,
                        cfg: STFTLossConfig = STFTLossConfig()) -> GeneratorLoss:
    """MR-STFT(sum, ref) + lambda_adv * adversarial loss on the sum.

    ``output`` may be a :class:`PeriodNetOutput`, whose ``sum`` is used;
    component waveforms never enter the objective.
    """
    x_hat = output.sum if isinstance(output, PeriodNetOutput) else tc.as_tensor(output)
    stft = mr_stft_loss(x_hat, x_ref, cfg)
    if weights.lambda_adv == 0:
        return GeneratorLoss(stft, stft)
    if bank is None:
        raise ValueError("adversarial weight is non-zero but no discriminator bank was given")
    adv = adversarial_g_loss(discriminate(bank, x_hat))
    return GeneratorLoss(stft + adv * weights.lambda_adv, stft, adv)
